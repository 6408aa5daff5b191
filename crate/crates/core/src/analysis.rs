//! Measurement instruments: analytic MAC accounting for both encoder paths,
//! the semantic-drift cosine between original and corrupted inputs, and
//! linear probes over layer representations.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{encode, Vocab, MASK, PAD, SPECIAL_TOKENS};
use crate::model::{Model, ModelConfig};
use crate::tensor::{math, Tensor};
use crate::{checkpoint, mix_seed, Error, Result};

// ---------------------------------------------------------------------------
// arithmetic cost

/// Multiply-accumulate counts for one forward pass of each encoder path.
/// 1 MAC = 1 multiply + 1 add; element-wise work (norms, activations,
/// softmax) is not counted. Embedding lookups cost no MACs.
#[derive(Debug, Clone, Serialize)]
pub struct FlopReport {
    pub seq_len: usize,
    /// Active length inside the drop window: ceil(keep_ratio * seq_len).
    pub kept_len: usize,
    pub keep_ratio: f64,
    pub per_layer_full: Vec<u64>,
    pub per_layer_drop: Vec<u64>,
    pub embedding: u64,
    pub head: u64,
    pub total_full: u64,
    pub total_drop: u64,
    /// 1 - total_drop / total_full.
    pub reduction: f64,
}

/// Attention and FFN MACs for one layer at active length `s`: the four
/// d-by-d projections, the two s-by-s score/context products, and the two
/// FFN matmuls.
fn layer_macs(s: usize, d: usize, ffn: usize) -> u64 {
    let (s, d, f) = (s as u64, d as u64, ffn as u64);
    4 * s * d * d + 2 * s * s * d + 2 * s * d * f
}

/// Head MACs at length `s`: the dense transform plus the tied vocabulary
/// projection.
fn head_macs(s: usize, d: usize, vocab: usize) -> u64 {
    let (s, d, v) = (s as u64, d as u64, vocab as u64);
    s * d * d + s * d * v
}

/// Counts both paths for a full-length sequence (`s0 = cfg.max_seq`): full
/// layers run at s0, window layers at ceil(keep_ratio * s0), and the head is
/// counted once per path at full length.
pub fn flop_count(cfg: &ModelConfig, keep_ratio: f64) -> Result<FlopReport> {
    cfg.validate()?;
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "keep_ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    let s0 = cfg.max_seq;
    let kept = (keep_ratio * s0 as f64).ceil() as usize;
    let per_layer_full: Vec<u64> =
        (0..cfg.l).map(|_| layer_macs(s0, cfg.d, cfg.ffn_dim)).collect();
    let per_layer_drop: Vec<u64> = (0..cfg.l)
        .map(|i| {
            let in_window = i >= cfg.drop_start && i < cfg.drop_end;
            layer_macs(if in_window { kept } else { s0 }, cfg.d, cfg.ffn_dim)
        })
        .collect();
    let embedding = 0u64;
    let head = head_macs(s0, cfg.d, cfg.vocab_size);
    let total_full = per_layer_full.iter().sum::<u64>() + embedding + head;
    let total_drop = per_layer_drop.iter().sum::<u64>() + embedding + head;
    let reduction = (total_full - total_drop) as f64 / total_full as f64;
    Ok(FlopReport {
        seq_len: s0,
        kept_len: kept,
        keep_ratio,
        per_layer_full,
        per_layer_drop,
        embedding,
        head,
        total_full,
        total_drop,
        reduction,
    })
}

impl FlopReport {
    /// Aligned plain-text rendering for terminal output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "forward-pass MACs (1 MAC = 1 multiply + 1 add), seq {}, kept {} (keep_ratio {})",
            self.seq_len, self.kept_len, self.keep_ratio
        )
        .expect("string write");
        writeln!(out, "{:<12} {:>16} {:>16}", "component", "full", "drop").expect("string write");
        for (i, (f, d)) in self.per_layer_full.iter().zip(&self.per_layer_drop).enumerate() {
            writeln!(out, "{:<12} {f:>16} {d:>16}", format!("layer {i}")).expect("string write");
        }
        writeln!(out, "{:<12} {:>16} {:>16}", "embedding", self.embedding, self.embedding)
            .expect("string write");
        writeln!(out, "{:<12} {:>16} {:>16}", "head", self.head, self.head).expect("string write");
        writeln!(out, "{:<12} {:>16} {:>16}", "total", self.total_full, self.total_drop)
            .expect("string write");
        writeln!(out, "{:<12} {:>16.4}", "reduction", self.reduction).expect("string write");
        out
    }
}

// ---------------------------------------------------------------------------
// semantic drift

/// Cosine similarity with exact endpoints: bitwise-identical vectors give
/// 1.0 and bitwise-negated vectors give -1.0, so self- and antipodal
/// comparisons are not at the mercy of rounding. Everything else is
/// dot / (|a||b|), clamped into [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!(
            "cosine over vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        return Ok(1.0);
    }
    if a.iter().zip(b).all(|(x, y)| x.to_bits() == (-y).to_bits()) {
        return Ok(-1.0);
    }
    let na = math::dot(a, a).sqrt();
    let nb = math::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine of a zero-norm vector".into()));
    }
    Ok((math::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean of the hidden rows at non-padding positions.
pub fn mean_pool(hidden: &Tensor, ids: &[usize]) -> Result<Vec<f64>> {
    if hidden.rank() != 2 || hidden.shape()[0] != ids.len() {
        return Err(Error::shape(
            "mean_pool",
            format!("{:?} hidden for {} ids", hidden.shape(), ids.len()),
        ));
    }
    let d = hidden.shape()[1];
    let data = hidden.data();
    let mut acc = vec![0.0f64; d];
    let mut n = 0usize;
    for (i, &id) in ids.iter().enumerate() {
        if id == PAD {
            continue;
        }
        n += 1;
        let row = &data[i * d..(i + 1) * d];
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    if n == 0 {
        return Err(Error::Input("mean_pool over padding only".into()));
    }
    let inv = 1.0 / n as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

/// Cosine between the mean-pooled final hidden states of the original and
/// corrupted sequences under a frozen encoder. Identical inputs return 1.0
/// exactly.
pub fn semantic_drift(model: &Model, original: &[usize], corrupted: &[usize]) -> Result<f64> {
    if original.len() != corrupted.len() {
        return Err(Error::Input(format!(
            "drift inputs must share one padded length, got {} and {}",
            original.len(),
            corrupted.len()
        )));
    }
    let a = mean_pool(&model.forward_full(original, false)?.final_hidden, original)?;
    let b = mean_pool(&model.forward_full(corrupted, false)?.final_hidden, corrupted)?;
    cosine(&a, &b)
}

/// The two corruption styles drift is measured under: masking keeps the
/// sequence shape, dropping deletes tokens and re-pads at the tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    Mask { rate: f64 },
    Drop { rate: f64 },
}

impl Corruption {
    pub fn rate(&self) -> f64 {
        match self {
            Corruption::Mask { rate } | Corruption::Drop { rate } => *rate,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Corruption::Mask { .. } => "mask",
            Corruption::Drop { .. } => "drop",
        }
    }
}

fn is_content(id: usize) -> bool {
    id >= SPECIAL_TOKENS.len()
}

/// Applies the corruption to content tokens only; specials and padding
/// survive, and the output length always equals the input length.
pub fn corrupt<R: Rng>(ids: &[usize], corruption: &Corruption, rng: &mut R) -> Result<Vec<usize>> {
    let rate = corruption.rate();
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(Error::Config(format!("corruption rate must lie in [0, 1], got {rate}")));
    }
    match corruption {
        Corruption::Mask { .. } => Ok(ids
            .iter()
            .map(|&id| if is_content(id) && rng.gen::<f64>() < rate { MASK } else { id })
            .collect()),
        Corruption::Drop { .. } => {
            let mut out: Vec<usize> = ids
                .iter()
                .filter(|&&id| !(is_content(id) && rng.gen::<f64>() < rate))
                .copied()
                .collect();
            out.resize(ids.len(), PAD);
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// drift curves over checkpoints

/// Drift of one corruption setting at one checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub checkpoint: String,
    /// Training step the checkpoint was saved at.
    pub step: u64,
    pub corruption: String,
    pub rate: f64,
    pub mean: f64,
    pub stddev: f64,
    pub cosines: Vec<f64>,
}

/// Measures `sentences` against one frozen encoder. Corruption draws come
/// from (seed, sentence index), so every checkpoint in a curve sees the same
/// corrupted variants.
pub fn drift_report(
    model: &Model,
    vocab: &Vocab,
    tag: &str,
    step: u64,
    sentences: &[String],
    corruption: &Corruption,
    seed: u64,
) -> Result<DriftReport> {
    if sentences.is_empty() {
        return Err(Error::Input("drift needs at least one sentence".into()));
    }
    let mut cosines = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let ids = encode(s, vocab, model.cfg.max_seq)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD21F7, i as u64));
        let corrupted = corrupt(&ids, corruption, &mut rng)?;
        cosines.push(semantic_drift(model, &ids, &corrupted)?);
    }
    let n = cosines.len() as f64;
    let mean = math::sum(&cosines) / n;
    let stddev = (math::sq_dev_sum(&cosines, mean) / n).sqrt();
    Ok(DriftReport {
        checkpoint: tag.to_string(),
        step,
        corruption: corruption.kind().to_string(),
        rate: corruption.rate(),
        mean,
        stddev,
        cosines,
    })
}

/// One DriftReport per checkpoint file, in the order given.
pub fn drift_curve(
    checkpoints: &[PathBuf],
    sentences: &[String],
    corruption: &Corruption,
    seed: u64,
) -> Result<Vec<DriftReport>> {
    if checkpoints.is_empty() {
        return Err(Error::Input("drift curve needs at least one checkpoint".into()));
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let data = checkpoint::load(path)?;
        let (model, vocab) = checkpoint::rebuild_model(&data)?;
        out.push(drift_report(
            &model,
            &vocab,
            &path.display().to_string(),
            data.header.t,
            sentences,
            corruption,
            seed,
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// linear probing

const PROBE_LR: f64 = 0.1;

/// Held-out score of a linear probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeOutcome {
    pub accuracy: f64,
    /// Fraction of the held-out split carrying the training split's most
    /// frequent label.
    pub majority_baseline: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains a multinomial logistic probe (full-batch gradient descent, zero
/// init, bias feature, fixed learning rate) on a seeded 80/20 split and
/// scores the held-out fifth. Deterministic for a fixed seed.
pub fn probe(reps: &[Vec<f64>], labels: &[usize], epochs: usize, seed: u64) -> Result<ProbeOutcome> {
    if reps.is_empty() || reps.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} representations against {} labels",
            reps.len(),
            labels.len()
        )));
    }
    let dim = reps[0].len();
    if dim == 0 || reps.iter().any(|r| r.len() != dim) {
        return Err(Error::Input("representations must share one nonzero width".into()));
    }
    // class set and per-class counts
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let c = classes.len();
    if c < 2 {
        return Err(Error::Input("probe needs at least two classes".into()));
    }
    for &cls in &classes {
        let n = labels.iter().filter(|&&l| l == cls).count();
        if n < 20 {
            return Err(Error::Input(format!(
                "class {cls} has {n} examples, probing needs at least 20"
            )));
        }
    }
    let class_index = |l: usize| classes.binary_search(&l).expect("label in class set");

    // seeded 80/20 split
    let n = reps.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let test_size = (n as f64 * 0.2).ceil() as usize;
    let (test_idx, train_idx) = order.split_at(test_size);

    // gradient descent on W[(dim+1) x c], bias folded in as a constant feature
    let d1 = dim + 1;
    let mut w = vec![0.0f64; d1 * c];
    let feats = |i: usize| -> Vec<f64> {
        let mut x = reps[i].clone();
        x.push(1.0);
        x
    };
    let nt = train_idx.len() as f64;
    let mut probs = vec![0.0f64; c];
    for _ in 0..epochs {
        let mut grad = vec![0.0f64; d1 * c];
        for &i in train_idx {
            let x = feats(i);
            for (k, p) in probs.iter_mut().enumerate() {
                *p = math::dot(&x, &w[k * d1..(k + 1) * d1]);
            }
            let mx = math::max(&probs);
            for p in probs.iter_mut() {
                *p = math::fast_exp(*p - mx);
            }
            let inv = 1.0 / math::sum(&probs);
            let y = class_index(labels[i]);
            for k in 0..c {
                let err = probs[k] * inv - if k == y { 1.0 } else { 0.0 };
                let g = &mut grad[k * d1..(k + 1) * d1];
                for (gj, &xj) in g.iter_mut().zip(&x) {
                    *gj += err * xj;
                }
            }
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= PROBE_LR * gj / nt;
        }
    }

    // majority class of the training split, ties to the smaller class id
    let mut counts = vec![0usize; c];
    for &i in train_idx {
        counts[class_index(labels[i])] += 1;
    }
    let majority = (0..c).max_by_key(|&k| (counts[k], c - k)).expect("nonempty classes");

    let mut hits = 0usize;
    let mut majority_hits = 0usize;
    for &i in test_idx {
        let x = feats(i);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..c {
            let v = math::dot(&x, &w[k * d1..(k + 1) * d1]);
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        let y = class_index(labels[i]);
        hits += usize::from(best == y);
        majority_hits += usize::from(majority == y);
    }
    Ok(ProbeOutcome {
        accuracy: hits as f64 / test_idx.len() as f64,
        majority_baseline: majority_hits as f64 / test_idx.len() as f64,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
    })
}
