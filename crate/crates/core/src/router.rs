//! Importance scoring and the kept/dropped token partition.
//!
//! Positions are split into group1 (kept: processed by every layer) and
//! group2 (dropped: frozen through the middle layers). Masked positions and
//! non-padding special tokens are always kept; padding is always dropped.
//! Remaining slots go to the highest-scoring free positions.

use rand::Rng;

use crate::data::{MaskedRow, PAD, SPECIAL_TOKENS};
use crate::error::{Error, Result};

/// Per-vocab-id running mean of observed MLM loss.
///
/// Ids never observed score +inf: a token we know nothing about is never
/// dropped in favor of one we do.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceState {
    cum_loss: Vec<f64>,
    counts: Vec<u64>,
}

impl ImportanceState {
    pub fn new(vocab_size: usize) -> ImportanceState {
        ImportanceState {
            cum_loss: vec![0.0; vocab_size],
            counts: vec![0; vocab_size],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn score(&self, id: usize) -> f64 {
        if self.counts.get(id).copied().unwrap_or(0) == 0 {
            f64::INFINITY
        } else {
            self.cum_loss[id]
        }
    }

    /// Folds one batch of (original id, loss) observations into the running
    /// means. Losses come from masked positions only.
    pub fn update(&mut self, token_ids: &[usize], per_token_loss: &[f64]) -> Result<()> {
        if token_ids.len() != per_token_loss.len() {
            return Err(Error::Input(format!(
                "importance update got {} ids but {} losses",
                token_ids.len(),
                per_token_loss.len()
            )));
        }
        for (&id, &loss) in token_ids.iter().zip(per_token_loss) {
            if !(loss >= 0.0) || !loss.is_finite() {
                return Err(Error::Input(format!(
                    "per-token loss must be finite and nonnegative, got {loss} for id {id}"
                )));
            }
            if id >= self.counts.len() {
                return Err(Error::Contract(format!(
                    "vocab id {id} outside importance table of size {}",
                    self.counts.len()
                )));
            }
            self.counts[id] += 1;
            self.cum_loss[id] += (loss - self.cum_loss[id]) / self.counts[id] as f64;
        }
        Ok(())
    }

    /// Raw table access for checkpointing.
    pub fn to_parts(&self) -> (&[f64], &[u64]) {
        (&self.cum_loss, &self.counts)
    }

    pub fn from_parts(cum_loss: Vec<f64>, counts: Vec<u64>) -> Result<ImportanceState> {
        if cum_loss.len() != counts.len() {
            return Err(Error::Input("importance table length mismatch".into()));
        }
        if cum_loss.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("importance table holds non-finite loss".into()));
        }
        Ok(ImportanceState { cum_loss, counts })
    }
}

/// Assigns a score to a free position; higher means more likely kept.
pub trait Scorer {
    fn score(&mut self, position: usize, token_id: usize) -> f64;
}

/// Running-mean loss scorer. Consumes no randomness.
pub struct CumLossScorer<'a>(pub &'a ImportanceState);

impl Scorer for CumLossScorer<'_> {
    fn score(&mut self, _position: usize, token_id: usize) -> f64 {
        self.0.score(token_id)
    }
}

/// Ablation baseline: uniform random scores from a seeded stream.
pub struct RandomScorer<R: Rng>(pub R);

impl<R: Rng> Scorer for RandomScorer<R> {
    fn score(&mut self, _position: usize, _token_id: usize) -> f64 {
        self.0.gen()
    }
}

/// The partition for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingPlan {
    /// Kept positions, ascending.
    pub group1: Vec<usize>,
    /// Dropped positions (always including padding), ascending.
    pub group2: Vec<usize>,
    /// inverse[p] = row of original position p inside (group1 ++ group2).
    pub inverse: Vec<usize>,
}

impl RoutingPlan {
    fn from_groups(group1: Vec<usize>, group2: Vec<usize>) -> RoutingPlan {
        let s0 = group1.len() + group2.len();
        let mut inverse = vec![0usize; s0];
        for (k, &p) in group1.iter().chain(group2.iter()).enumerate() {
            inverse[p] = k;
        }
        RoutingPlan { group1, group2, inverse }
    }

    pub fn seq_len(&self) -> usize {
        self.inverse.len()
    }
}

/// Builds the partition for one row.
///
/// group1 size = max(#forced, ceil(keep_ratio * s_real)) where s_real counts
/// non-padding positions. Free slots are filled by descending score, ties by
/// lower position index.
pub fn make_plan<S: Scorer>(
    row: &MaskedRow,
    keep_ratio: f64,
    scorer: &mut S,
) -> Result<RoutingPlan> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "keep_ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    let s0 = row.seq_len();
    let mut forced = Vec::new();
    let mut free = Vec::new();
    let mut pads = Vec::new();
    for j in 0..s0 {
        let id = row.original_ids[j];
        if id == PAD {
            pads.push(j);
        } else if row.mask_positions[j] || id < SPECIAL_TOKENS.len() {
            forced.push(j);
        } else {
            free.push(j);
        }
    }
    let s_real = s0 - pads.len();
    let target = (keep_ratio * s_real as f64).ceil() as usize;
    let group1_size = forced.len().max(target);

    // score every free position, then keep the strongest
    let mut ranked: Vec<(usize, f64)> = free
        .iter()
        .map(|&j| (j, scorer.score(j, row.original_ids[j])))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let extra = group1_size - forced.len();
    let mut group1 = forced;
    group1.extend(ranked.iter().take(extra).map(|&(j, _)| j));
    group1.sort_unstable();

    let mut group2: Vec<usize> = ranked.iter().skip(extra).map(|&(j, _)| j).collect();
    group2.extend(pads);
    group2.sort_unstable();

    Ok(RoutingPlan::from_groups(group1, group2))
}
