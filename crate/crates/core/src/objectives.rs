//! Training objectives: masked-token cross-entropy on both encoder paths,
//! KL consistency between their output distributions, and the composed
//! per-step loss.
//!
//! The consistency terms compare the full-sequence pass (teacher) against
//! the token-dropping pass (student) through the shared vocabulary head,
//! at masked positions only. By default the teacher side enters the KL as
//! a constant so the constraint pulls the student toward the teacher and
//! not the other way around.

use crate::data::IGNORE;
use crate::model::{EncoderOutput, Model};
use crate::tensor::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Weight of the consistency terms in the composed loss.
pub const DEFAULT_LAMBDA: f64 = 0.05;
/// Every `FI`-th step runs the dual-path objective.
pub const DEFAULT_FI: u64 = 10;

// Probabilities are clamped here before any log. Softmax output can
// underflow to zero; ln must stay finite.
const PROB_FLOOR: f64 = 1e-12;

/// Per-position probability rows over the vocabulary.
#[derive(Debug, Clone)]
pub struct Distribution {
    /// [positions x vocab], every row normalized.
    pub probs: Tensor,
    /// The sequence position each row speaks for.
    pub support: Vec<usize>,
}

impl Distribution {
    /// Validates and wraps probability rows: one support entry per row,
    /// entries nonnegative, each row summing to 1 within 1e-9.
    pub fn from_probs(probs: Tensor, support: Vec<usize>) -> Result<Distribution> {
        if probs.rank() != 2 {
            return Err(Error::shape("distribution", format!("{:?}", probs.shape())));
        }
        let (n, _v) = (probs.shape()[0], probs.shape()[1]);
        if n == 0 {
            return Err(Error::Contract("distribution needs at least one row".into()));
        }
        if support.len() != n {
            return Err(Error::Contract(format!(
                "{} support positions for {} rows",
                support.len(),
                n
            )));
        }
        {
            let data = probs.data();
            for (i, row) in data.chunks(probs.shape()[1]).enumerate() {
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Contract(format!("negative probability in row {i}")));
                }
                let s = math::sum(row);
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!("row {i} sums to {s}, not 1")));
                }
            }
        }
        Ok(Distribution { probs, support })
    }

    /// Softmax over the vocabulary axis, then the same validation.
    pub fn from_logits(logits: &Tensor, support: Vec<usize>) -> Result<Distribution> {
        Self::from_probs(logits.softmax(1)?, support)
    }
}

/// Mean cross-entropy over the labeled rows of `logits`. Rows carrying
/// IGNORE are left out of the mean entirely; at least one row must be
/// labeled, because a masking pass that produced zero targets is a bug in
/// the caller, not a zero loss.
pub fn mlm_loss(logits: &Tensor, labels: &[i64]) -> Result<Tensor> {
    let (n, v) = logits_dims(logits, labels)?;
    let mut keep = Vec::new();
    let mut picks = Vec::new();
    for (i, &l) in labels.iter().enumerate().take(n) {
        if l == IGNORE {
            continue;
        }
        if l < 0 || l as usize >= v {
            return Err(Error::Input(format!("label {l} out of range for vocab {v}")));
        }
        keep.push(i);
        picks.push(l as usize);
    }
    if keep.is_empty() {
        return Err(Error::Contract("cross-entropy over zero labeled rows".into()));
    }
    logits
        .gather_rows(&keep)?
        .log_softmax_rows()?
        .pick(&picks)?
        .mean_all()?
        .scale(-1.0)
}

/// The same per-row negative log-likelihoods as `mlm_loss`, computed as
/// plain numbers with no graph behind them. Feeds the running importance
/// scores, so every row must carry a real label.
pub fn per_token_nll(logits: &Tensor, labels: &[i64]) -> Result<Vec<f64>> {
    let (n, v) = logits_dims(logits, labels)?;
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    let mut scratch = vec![0.0; v];
    for i in 0..n {
        let l = labels[i];
        if l < 0 || l as usize >= v {
            return Err(Error::Input(format!("label {l} out of range for vocab {v}")));
        }
        let row = &data[i * v..(i + 1) * v];
        let m = math::max(row);
        for (s, &x) in scratch.iter_mut().zip(row) {
            *s = math::fast_exp(x - m);
        }
        let lse = m + math::sum(&scratch).ln();
        out.push(lse - row[l as usize]);
    }
    Ok(out)
}

fn logits_dims(logits: &Tensor, labels: &[i64]) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::shape("mlm_loss", format!("{:?}", logits.shape())));
    }
    let (n, v) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for {} rows", labels.len(), n)));
    }
    Ok((n, v))
}

/// KL(teacher || student), averaged over rows. Both sides are clamped at
/// PROB_FLOOR inside the log, which keeps 0 * ln 0 out of the graph; the
/// distortion is bounded by floor * ln(1/floor) per entry, orders below
/// every tolerance this crate promises.
pub fn kl_div(teacher: &Distribution, student: &Distribution) -> Result<Tensor> {
    if teacher.probs.shape() != student.probs.shape() {
        return Err(Error::Contract(format!(
            "distribution shapes differ: {:?} vs {:?}",
            teacher.probs.shape(),
            student.probs.shape()
        )));
    }
    if teacher.support != student.support {
        return Err(Error::Contract("distribution supports differ".into()));
    }
    let n = teacher.probs.shape()[0] as f64;
    let t_ln = teacher.probs.clamp_min(PROB_FLOOR)?.ln()?;
    let s_ln = student.probs.clamp_min(PROB_FLOOR)?.ln()?;
    teacher.probs.mul(&t_ln.sub(&s_ln)?)?.sum_all()?.scale(1.0 / n)
}

/// The two consistency terms between a full pass and a drop pass over the
/// same input: one on the final hidden states, one on the states that fed
/// the last layer. Distributions come from the shared vocabulary head at
/// `positions` (the masked positions). With `detach_teacher` the full-pass
/// side carries no gradient.
pub fn sc_losses(
    model: &Model,
    base: &EncoderOutput,
    drop: &EncoderOutput,
    positions: &[usize],
    detach_teacher: bool,
) -> Result<(Tensor, Tensor)> {
    if positions.is_empty() {
        return Err(Error::Contract("consistency loss over zero positions".into()));
    }
    let dist = |hidden: &Tensor, detach: bool| -> Result<Distribution> {
        let probs = model.mlm_head(&hidden.gather_rows(positions)?)?.softmax(1)?;
        let probs = if detach { probs.detach() } else { probs };
        Distribution::from_probs(probs, positions.to_vec())
    };
    let sc_g = kl_div(
        &dist(&base.final_hidden, detach_teacher)?,
        &dist(&drop.final_hidden, false)?,
    )?;
    let sc_l = kl_div(
        &dist(&base.penultimate, detach_teacher)?,
        &dist(&drop.penultimate, false)?,
    )?;
    Ok((sc_g, sc_l))
}

/// True on the steps that run the dual-path objective. Steps count from 1.
pub fn is_sc_step(t: u64, fi: u64) -> bool {
    assert!(fi >= 1, "schedule interval must be positive");
    t % fi == 0
}

/// The teacher-side pieces that only exist on consistency steps.
pub struct ScParts {
    pub mlm_base: Tensor,
    pub sc_g: Tensor,
    pub sc_l: Tensor,
}

/// Loss values of one training step, as plain numbers for logging. The
/// optional fields exist only on consistency steps.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBundle {
    pub mlm_drop: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc_l: Option<f64>,
    pub total: f64,
    pub is_sc_step: bool,
}

/// One step's loss: the graph root to backpropagate plus the logged values.
pub struct StepLoss {
    pub total: Tensor,
    pub bundle: LossBundle,
}

/// Composes the per-step loss. On consistency steps (t mod Fi = 0) the two
/// cross-entropies average and the consistency terms enter at weight
/// lambda; on every other step the drop-path cross-entropy passes through
/// untouched. `sc` must be present exactly on consistency steps.
pub fn total_loss(
    mlm_drop: &Tensor,
    sc: Option<&ScParts>,
    t: u64,
    fi: u64,
    lambda: f64,
) -> Result<StepLoss> {
    if fi == 0 {
        return Err(Error::Config("schedule interval must be positive".into()));
    }
    if t == 0 {
        return Err(Error::Config("steps count from 1".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("negative consistency weight {lambda}")));
    }
    let sc_step = is_sc_step(t, fi);
    match (sc_step, sc) {
        (true, Some(parts)) => {
            let total = mlm_drop
                .scale(0.5)?
                .add(&parts.mlm_base.scale(0.5)?)?
                .add(&parts.sc_g.add(&parts.sc_l)?.scale(lambda)?)?;
            let bundle = LossBundle {
                mlm_drop: mlm_drop.item()?,
                mlm_base: Some(parts.mlm_base.item()?),
                sc_g: Some(parts.sc_g.item()?),
                sc_l: Some(parts.sc_l.item()?),
                total: total.item()?,
                is_sc_step: true,
            };
            Ok(StepLoss { total, bundle })
        }
        (false, None) => {
            let bundle = LossBundle {
                mlm_drop: mlm_drop.item()?,
                mlm_base: None,
                sc_g: None,
                sc_l: None,
                total: mlm_drop.item()?,
                is_sc_step: false,
            };
            Ok(StepLoss { total: mlm_drop.clone(), bundle })
        }
        (true, None) => Err(Error::Contract(format!(
            "step {t} runs the dual objective but no teacher parts were given"
        ))),
        (false, Some(_)) => Err(Error::Contract(format!(
            "step {t} is a plain step but teacher parts were given"
        ))),
    }
}
