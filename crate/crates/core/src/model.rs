//! The transformer MLM encoder with two forward paths: full-sequence, and
//! token-dropping where low-importance rows skip the middle layers.
//!
//! Post-layer-norm blocks throughout. Position information is added once at
//! the embedding, so gathered rows carry it along and the merge restores
//! original order with no re-encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::PAD;
use crate::error::{Error, Result};
use crate::router::RoutingPlan;
use crate::tensor::Tensor;

/// Layer-norm epsilon, inside the square root.
pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Transformer layer count.
    pub l: usize,
    /// Hidden size.
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Last layer that sees the full sequence before the drop window.
    pub drop_start: usize,
    /// Last layer of the drop window; the merge happens right after it.
    pub drop_end: usize,
    /// Fraction of non-padding tokens kept through the drop window.
    pub keep_ratio: f64,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, d=128, window = layers 2..=3.
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            l: 4,
            d: 128,
            heads: 4,
            ffn_dim: 256,
            vocab_size,
            max_seq: 128,
            drop_start: 1,
            drop_end: 3,
            keep_ratio: 0.5,
        }
    }

    pub fn default_drop_start(l: usize) -> usize {
        l / 2 - 1
    }

    pub fn default_drop_end(l: usize) -> usize {
        l - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.d == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("l, d, heads, ffn_dim must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.vocab_size < crate::data::SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        if self.max_seq < 3 {
            return Err(Error::Config("max_seq must be at least 3".into()));
        }
        if !(1 <= self.drop_start && self.drop_start < self.drop_end && self.drop_end <= self.l - 1)
        {
            return Err(Error::Config(format!(
                "drop window needs 1 <= drop_start < drop_end <= l-1; got start {}, end {}, l {}",
                self.drop_start, self.drop_end, self.l
            )));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep_ratio must lie in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        Ok(())
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

/// All model parameters. The vocabulary projection of the MLM head is tied
/// to `tok_emb`, so it appears here exactly once.
#[derive(Debug, Clone)]
pub struct Params {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_g: Tensor,
    pub emb_ln_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub head_ln_g: Tensor,
    pub head_ln_b: Tensor,
    pub out_bias: Tensor,
}

impl Params {
    /// Deterministic (name, tensor, weight_decay) listing. The order is the
    /// serialization and optimizer-state order, so it must never change.
    pub fn named(&self) -> Vec<(String, Tensor, bool)> {
        let mut out: Vec<(String, Tensor, bool)> = vec![
            ("tok_emb".into(), self.tok_emb.clone(), true),
            ("pos_emb".into(), self.pos_emb.clone(), true),
            ("emb_ln_g".into(), self.emb_ln_g.clone(), false),
            ("emb_ln_b".into(), self.emb_ln_b.clone(), false),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let mut push = |suffix: &str, t: &Tensor, decay: bool| {
                out.push((format!("layer{i}.{suffix}"), t.clone(), decay));
            };
            push("wq", &l.wq, true);
            push("bq", &l.bq, false);
            push("wk", &l.wk, true);
            push("bk", &l.bk, false);
            push("wv", &l.wv, true);
            push("bv", &l.bv, false);
            push("wo", &l.wo, true);
            push("bo", &l.bo, false);
            push("ln1_g", &l.ln1_g, false);
            push("ln1_b", &l.ln1_b, false);
            push("w1", &l.w1, true);
            push("b1", &l.b1, false);
            push("w2", &l.w2, true);
            push("b2", &l.b2, false);
            push("ln2_g", &l.ln2_g, false);
            push("ln2_b", &l.ln2_b, false);
        }
        out.push(("head_w".into(), self.head_w.clone(), true));
        out.push(("head_b".into(), self.head_b.clone(), false));
        out.push(("head_ln_g".into(), self.head_ln_g.clone(), false));
        out.push(("head_ln_b".into(), self.head_ln_b.clone(), false));
        out.push(("out_bias".into(), self.out_bias.clone(), false));
        out
    }
}

/// Result of one encoder pass over one sequence.
pub struct EncoderOutput {
    /// Hidden states after the last layer, always full length.
    pub final_hidden: Tensor,
    /// The full-length tensor that fed the last layer. On the drop path
    /// with the default window this is the merged sequence: kept rows from
    /// the layer before last, dropped rows frozen where the window opened.
    pub penultimate: Tensor,
    /// Per-layer outputs (index 0 = embedding), kept on request only.
    pub activations: Option<Vec<Tensor>>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Fresh parameters: weights and embeddings N(0, 0.02), biases zero,
    /// layer-norm gains one.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut randn = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::param(data, shape).expect("init shape")
        };
        let d = cfg.d;
        let mut layers = Vec::with_capacity(cfg.l);
        let tok_emb = randn(&[cfg.vocab_size, d]);
        let pos_emb = randn(&[cfg.max_seq, d]);
        for _ in 0..cfg.l {
            layers.push(LayerParams {
                wq: randn(&[d, d]),
                bq: Tensor::param(vec![0.0; d], &[d])?,
                wk: randn(&[d, d]),
                bk: Tensor::param(vec![0.0; d], &[d])?,
                wv: randn(&[d, d]),
                bv: Tensor::param(vec![0.0; d], &[d])?,
                wo: randn(&[d, d]),
                bo: Tensor::param(vec![0.0; d], &[d])?,
                ln1_g: Tensor::param(vec![1.0; d], &[d])?,
                ln1_b: Tensor::param(vec![0.0; d], &[d])?,
                w1: randn(&[d, cfg.ffn_dim]),
                b1: Tensor::param(vec![0.0; cfg.ffn_dim], &[cfg.ffn_dim])?,
                w2: randn(&[cfg.ffn_dim, d]),
                b2: Tensor::param(vec![0.0; d], &[d])?,
                ln2_g: Tensor::param(vec![1.0; d], &[d])?,
                ln2_b: Tensor::param(vec![0.0; d], &[d])?,
            });
        }
        let params = Params {
            tok_emb,
            pos_emb,
            emb_ln_g: Tensor::param(vec![1.0; d], &[d])?,
            emb_ln_b: Tensor::param(vec![0.0; d], &[d])?,
            layers,
            head_w: randn(&[d, d]),
            head_b: Tensor::param(vec![0.0; d], &[d])?,
            head_ln_g: Tensor::param(vec![1.0; d], &[d])?,
            head_ln_b: Tensor::param(vec![0.0; d], &[d])?,
            out_bias: Tensor::param(vec![0.0; cfg.vocab_size], &[cfg.vocab_size])?,
        };
        Ok(Model { cfg, params })
    }

    /// Token embedding + absolute position embedding, then layer norm.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Input("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                ids.len(),
                self.cfg.max_seq
            )));
        }
        let tok = self.params.tok_emb.gather_rows(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = self.params.pos_emb.gather_rows(&positions)?;
        tok.add(&pos)?
            .layer_norm(&self.params.emb_ln_g, &self.params.emb_ln_b, LN_EPS)
    }

    fn layer(&self, p: &LayerParams, x: &Tensor, pad: &[bool]) -> Result<Tensor> {
        let scale = 1.0 / ((self.cfg.d / self.cfg.heads) as f64).sqrt();
        let q = x.matmul(&p.wq)?.add_rows(&p.bq)?;
        let k = x.matmul(&p.wk)?.add_rows(&p.bk)?;
        let v = x.matmul(&p.wv)?.add_rows(&p.bv)?;
        let probs = q.attn_probs(&k, self.cfg.heads, scale, pad)?;
        let ctx = probs.attn_context(&v, self.cfg.heads)?;
        let o = ctx.matmul(&p.wo)?.add_rows(&p.bo)?;
        let x = x.add(&o)?.layer_norm(&p.ln1_g, &p.ln1_b, LN_EPS)?;
        let f = x
            .matmul(&p.w1)?
            .add_rows(&p.b1)?
            .gelu()?
            .matmul(&p.w2)?
            .add_rows(&p.b2)?;
        x.add(&f)?.layer_norm(&p.ln2_g, &p.ln2_b, LN_EPS)
    }

    /// All layers over the whole sequence; padding masked out of attention.
    pub fn forward_full(&self, ids: &[usize], keep_activations: bool) -> Result<EncoderOutput> {
        let pad: Vec<bool> = ids.iter().map(|&id| id == PAD).collect();
        let mut x = self.embed(ids)?;
        let mut acts = if keep_activations { Some(vec![x.clone()]) } else { None };
        let mut penultimate = x.clone();
        for i in 0..self.cfg.l {
            if i == self.cfg.l - 1 {
                penultimate = x.clone();
            }
            x = self.layer(&self.params.layers[i], &x, &pad)?;
            if let Some(a) = acts.as_mut() {
                a.push(x.clone());
            }
        }
        Ok(EncoderOutput { final_hidden: x, penultimate, activations: acts })
    }

    /// Token-dropping pass. Layers up to `drop_start` see the full
    /// sequence; inside the window only the plan's kept rows are computed,
    /// with attention restricted to them; dropped rows stay frozen at their
    /// window-open values and everything is merged back afterwards.
    pub fn forward_with_drop(
        &self,
        ids: &[usize],
        plan: &RoutingPlan,
        keep_activations: bool,
    ) -> Result<EncoderOutput> {
        if plan.seq_len() != ids.len() {
            return Err(Error::Contract(format!(
                "plan covers {} positions but the sequence has {}",
                plan.seq_len(),
                ids.len()
            )));
        }
        let pad: Vec<bool> = ids.iter().map(|&id| id == PAD).collect();
        let mut x = self.embed(ids)?;
        let mut acts = if keep_activations { Some(vec![x.clone()]) } else { None };
        for i in 0..self.cfg.drop_start {
            x = self.layer(&self.params.layers[i], &x, &pad)?;
            if let Some(a) = acts.as_mut() {
                a.push(x.clone());
            }
        }
        // window opens: split the sequence
        let mut kept = x.gather_rows(&plan.group1)?;
        let frozen = x.gather_rows(&plan.group2)?;
        let pad_kept: Vec<bool> = plan.group1.iter().map(|&j| pad[j]).collect();
        for i in self.cfg.drop_start..self.cfg.drop_end {
            kept = self.layer(&self.params.layers[i], &kept, &pad_kept)?;
            if let Some(a) = acts.as_mut() {
                a.push(kept.clone());
            }
        }
        let mut x = kept.merge_rows(&frozen, &plan.group1, &plan.group2)?;
        let mut penultimate = x.clone();
        for i in self.cfg.drop_end..self.cfg.l {
            if i == self.cfg.l - 1 {
                penultimate = x.clone();
            }
            x = self.layer(&self.params.layers[i], &x, &pad)?;
            if let Some(a) = acts.as_mut() {
                a.push(x.clone());
            }
        }
        Ok(EncoderOutput { final_hidden: x, penultimate, activations: acts })
    }

    /// Dense + GELU + layer norm, then projection onto the vocabulary with
    /// weights tied to the token embedding.
    pub fn mlm_head(&self, hidden: &Tensor) -> Result<Tensor> {
        if hidden.rank() != 2 || hidden.shape()[1] != self.cfg.d {
            return Err(Error::shape(
                "mlm_head",
                format!("expected [rows x {}], got {:?}", self.cfg.d, hidden.shape()),
            ));
        }
        let t = hidden
            .matmul(&self.params.head_w)?
            .add_rows(&self.params.head_b)?
            .gelu()?
            .layer_norm(&self.params.head_ln_g, &self.params.head_ln_b, LN_EPS)?;
        t.matmul(&self.params.tok_emb.transpose()?)?
            .add_rows(&self.params.out_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CLS, SEP};
    use crate::router::{make_plan, CumLossScorer, ImportanceState};
    use crate::tensor::gradcheck::{finite_diff_grad, max_rel_err};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(l: usize, d: usize, vocab: usize, keep: f64) -> Model {
        assert!(l >= 4, "tiny() uses the default drop window");
        let cfg = ModelConfig {
            l,
            d,
            heads: 2,
            ffn_dim: 2 * d,
            vocab_size: vocab,
            max_seq: 16,
            drop_start: ModelConfig::default_drop_start(l),
            drop_end: ModelConfig::default_drop_end(l),
            keep_ratio: keep,
        };
        Model::init(cfg, 42).unwrap()
    }

    fn plan_for(row: &crate::data::MaskedRow, keep: f64, vocab: usize) -> RoutingPlan {
        let st = ImportanceState::new(vocab);
        make_plan(row, keep, &mut CumLossScorer(&st)).unwrap()
    }

    fn row(original: Vec<usize>, masked: Vec<usize>) -> crate::data::MaskedRow {
        let n = original.len();
        let mut token_ids = original.clone();
        let mut labels = vec![crate::data::IGNORE; n];
        let mut mask_positions = vec![false; n];
        for &j in &masked {
            token_ids[j] = crate::data::MASK;
            labels[j] = original[j] as i64;
            mask_positions[j] = true;
        }
        crate::data::MaskedRow { token_ids, labels, mask_positions, original_ids: original }
    }

    #[test]
    fn config_validation_catches_bad_windows() {
        let mut cfg = ModelConfig::desk(100);
        assert!(cfg.validate().is_ok());
        cfg.drop_start = 0;
        assert!(cfg.validate().is_err());
        cfg.drop_start = 3;
        cfg.drop_end = 3;
        assert!(cfg.validate().is_err());
        cfg.drop_start = 1;
        cfg.drop_end = 4; // == l, merge would land after the last layer
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(100);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(100);
        cfg.keep_ratio = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_window_matches_halfway_to_last() {
        assert_eq!(ModelConfig::default_drop_start(12), 5);
        assert_eq!(ModelConfig::default_drop_end(12), 11);
        assert_eq!(ModelConfig::default_drop_start(4), 1);
        assert_eq!(ModelConfig::default_drop_end(4), 3);
    }

    #[test]
    fn embedding_is_deterministic_and_shape_correct() {
        let m = tiny(4, 8, 12, 0.5);
        let ids = [CLS, 6, 7, SEP, PAD];
        let a = m.embed(&ids).unwrap();
        let b = m.embed(&ids).unwrap();
        assert_eq!(a.shape(), &[5, 8]);
        assert!(a.to_vec().iter().zip(b.to_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(m.embed(&[CLS, 99, SEP]).is_err(), "id beyond vocab must fail");
        assert!(m.embed(&[CLS; 17]).is_err(), "length beyond max_seq must fail");
    }

    #[test]
    fn forward_full_shapes_and_determinism() {
        let m = tiny(4, 8, 12, 0.5);
        let ids = [CLS, 6, 7, 8, SEP, PAD];
        let out = m.forward_full(&ids, true).unwrap();
        assert_eq!(out.final_hidden.shape(), &[6, 8]);
        assert_eq!(out.penultimate.shape(), &[6, 8]);
        let acts = out.activations.unwrap();
        assert_eq!(acts.len(), 5); // embedding + 4 layers
        assert!(acts.iter().all(|a| a.shape() == [6, 8]));
        let again = m.forward_full(&ids, false).unwrap();
        let (x, y) = (out.final_hidden.to_vec(), again.final_hidden.to_vec());
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn drop_path_shape_schedule() {
        // l=4, d=8, s=6, |group1|=3: window layers produce 3x8, the merge
        // restores 6x8
        let m = tiny(4, 8, 16, 0.5);
        let r = row(vec![CLS, 6, 7, 8, 9, SEP], vec![]);
        let plan = plan_for(&r, 0.5, 16);
        assert_eq!(plan.group1.len(), 3);
        let out = m.forward_with_drop(&r.token_ids, &plan, true).unwrap();
        let acts = out.activations.unwrap();
        assert_eq!(acts[0].shape(), &[6, 8]);
        assert_eq!(acts[1].shape(), &[6, 8]); // layer 1, before the window
        assert_eq!(acts[2].shape(), &[3, 8]); // inside the window
        assert_eq!(acts[3].shape(), &[3, 8]);
        assert_eq!(acts[4].shape(), &[6, 8]); // last layer, after merge
        assert_eq!(out.final_hidden.shape(), &[6, 8]);
        assert_eq!(out.penultimate.shape(), &[6, 8]);
    }

    #[test]
    fn shape_schedule_sweep() {
        for &l in &[4usize, 6, 12] {
            for &keep in &[0.25f64, 0.5, 1.0] {
                let cfg = ModelConfig {
                    l,
                    d: 8,
                    heads: 2,
                    ffn_dim: 16,
                    vocab_size: 16,
                    max_seq: 16,
                    drop_start: ModelConfig::default_drop_start(l),
                    drop_end: ModelConfig::default_drop_end(l),
                    keep_ratio: keep,
                };
                let m = Model::init(cfg.clone(), 1).unwrap();
                let r = row(vec![CLS, 6, 7, 8, 9, 10, 11, SEP], vec![2]);
                let plan = plan_for(&r, keep, 16);
                let g1 = plan.group1.len();
                let out = m.forward_with_drop(&r.token_ids, &plan, true).unwrap();
                let acts = out.activations.unwrap();
                assert_eq!(acts.len(), l + 1);
                for (i, a) in acts.iter().enumerate() {
                    let want = if i <= cfg.drop_start || i == l { 8 } else { g1 };
                    assert_eq!(a.shape(), &[want, 8], "l={l} keep={keep} i={i}");
                }
            }
        }
    }

    #[test]
    fn keep_ratio_one_without_padding_equals_full_path() {
        let m = tiny(4, 8, 16, 1.0);
        let r = row(vec![CLS, 6, 7, 8, 9, 10, 11, SEP], vec![3]);
        let plan = plan_for(&r, 1.0, 16);
        assert!(plan.group2.is_empty());
        let full = m.forward_full(&r.token_ids, false).unwrap();
        let drop = m.forward_with_drop(&r.token_ids, &plan, false).unwrap();
        for (a, b) in [
            (&full.final_hidden, &drop.final_hidden),
            (&full.penultimate, &drop.penultimate),
        ] {
            let (x, y) = (a.to_vec(), b.to_vec());
            let worst = x
                .iter()
                .zip(&y)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0f64, f64::max);
            assert!(worst <= 1e-12, "paths differ by {worst}");
        }
    }

    #[test]
    fn group2_rows_stay_frozen_at_window_open() {
        let m = tiny(4, 8, 16, 0.5);
        let r = row(vec![CLS, 6, 7, 8, 9, 10, 11, SEP, PAD, PAD], vec![2]);
        let plan = plan_for(&r, 0.5, 16);
        assert!(!plan.group2.is_empty());
        let out = m.forward_with_drop(&r.token_ids, &plan, true).unwrap();
        let acts = out.activations.unwrap();
        let window_open = acts[m.cfg.drop_start].to_vec(); // full length
        let merged = out.penultimate.to_vec();
        let d = m.cfg.d;
        for &j in &plan.group2 {
            let a = &window_open[j * d..(j + 1) * d];
            let b = &merged[j * d..(j + 1) * d];
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "row {j} changed inside the window"
            );
        }
    }

    #[test]
    fn padding_never_leaks_into_real_rows() {
        let m = tiny(4, 8, 16, 0.5);
        let short = [CLS, 6, 7, SEP];
        let padded = [CLS, 6, 7, SEP, PAD, PAD, PAD];
        let a = m.forward_full(&short, false).unwrap().final_hidden.to_vec();
        let b = m.forward_full(&padded, false).unwrap().final_hidden.to_vec();
        let d = m.cfg.d;
        for j in 0..short.len() {
            let (x, y) = (&a[j * d..(j + 1) * d], &b[j * d..(j + 1) * d]);
            let worst = x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(worst <= 1e-12, "pad rows leaked into position {j}: {worst}");
        }
    }

    #[test]
    fn mlm_head_shape_and_row_normalization() {
        let m = tiny(4, 8, 12, 0.5);
        let ids = [CLS, 6, 7, SEP];
        let h = m.forward_full(&ids, false).unwrap().final_hidden;
        let logits = m.mlm_head(&h).unwrap();
        assert_eq!(logits.shape(), &[4, 12]);
        let p = logits.softmax(1).unwrap().to_vec();
        for row in p.chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(m.mlm_head(&Tensor::zeros(&[4, 9])).is_err());
    }

    #[test]
    fn tied_projection_links_embedding_row_to_logit_column() {
        let m = tiny(4, 8, 12, 0.5);
        let ids = [CLS, 6, SEP];
        // loss reads only vocab column 7; the tied projection must route
        // gradient into embedding row 7 even though id 7 is absent from the
        // input
        let k = 7usize;
        let build = || {
            let h = m.forward_full(&ids, false).unwrap().final_hidden;
            let logits = m.mlm_head(&h).unwrap();
            logits.pick(&vec![k; ids.len()]).unwrap().sum_all().unwrap()
        };
        let loss = build();
        loss.backward().unwrap();
        let g = m.params.tok_emb.grad().unwrap();
        let d = m.cfg.d;
        let row_k: f64 = g[k * d..(k + 1) * d].iter().map(|x| x.abs()).sum();
        assert!(row_k > 0.0, "no gradient reached the tied row");
        // finite-difference spot check on one tied coordinate
        let base = m.params.tok_emb.to_vec();
        let idx = k * d + 3;
        let numeric = finite_diff_grad(
            |x| {
                m.params.tok_emb.set_data(x).unwrap();
                build().item().unwrap()
            },
            &base,
            1e-5,
        );
        m.params.tok_emb.set_data(&base).unwrap();
        let err = max_rel_err(&[g[idx]], &[numeric[idx]], 1e-6);
        assert!(err < 1e-4, "tied gradient off by {err}");
    }

    #[test]
    fn full_path_gradients_match_finite_differences() {
        // 2-layer, d=8 model; loss = weighted sum of final hidden states
        let cfg = ModelConfig {
            l: 3,
            d: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_seq: 8,
            drop_start: 1,
            drop_end: 2,
            keep_ratio: 0.5,
        };
        let m = Model::init(cfg, 9).unwrap();
        let ids = [CLS, 6, 7, 8, SEP, PAD];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::constant(
            (0..6 * 8).map(|_| rng.gen::<f64>() - 0.5).collect(),
            &[6, 8],
        )
        .unwrap();
        let build = |m: &Model| {
            let out = m.forward_full(&ids, false).unwrap();
            out.final_hidden.mul(&w).unwrap().mean_all().unwrap()
        };
        let loss = build(&m);
        loss.backward().unwrap();
        // probe a spread of parameter kinds, not every coordinate
        for (name, t, _) in m.params.named() {
            if !["tok_emb", "pos_emb", "layer0.wq", "layer0.ln1_g", "layer1.w1", "layer2.wo"]
                .contains(&name.as_str())
            {
                continue;
            }
            let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            let base = t.to_vec();
            let numeric = finite_diff_grad(
                |x| {
                    t.set_data(x).unwrap();
                    build(&m).item().unwrap()
                },
                &base,
                1e-5,
            );
            t.set_data(&base).unwrap();
            let err = max_rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn drop_path_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            l: 4,
            d: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq: 12,
            drop_start: 1,
            drop_end: 3,
            keep_ratio: 0.5,
        };
        let m = Model::init(cfg, 17).unwrap();
        let r = row(vec![CLS, 6, 7, 8, 9, 10, SEP, PAD], vec![2]);
        let plan = plan_for(&r, 0.5, 16);
        assert!(!plan.group2.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::constant(
            (0..8 * 8).map(|_| rng.gen::<f64>() - 0.5).collect(),
            &[8, 8],
        )
        .unwrap();
        let build = |m: &Model| {
            let out = m.forward_with_drop(&r.token_ids, &plan, false).unwrap();
            out.final_hidden
                .mul(&w)
                .unwrap()
                .add(&out.penultimate.mul(&w).unwrap())
                .unwrap()
                .mean_all()
                .unwrap()
        };
        let loss = build(&m);
        loss.backward().unwrap();
        for (name, t, _) in m.params.named() {
            if !["tok_emb", "layer1.wk", "layer2.w2", "layer3.wv", "layer0.wo"]
                .contains(&name.as_str())
            {
                continue;
            }
            let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            let base = t.to_vec();
            let numeric = finite_diff_grad(
                |x| {
                    t.set_data(x).unwrap();
                    build(&m).item().unwrap()
                },
                &base,
                1e-5,
            );
            t.set_data(&base).unwrap();
            let err = max_rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn drop_path_rejects_mismatched_plan() {
        let m = tiny(4, 8, 16, 0.5);
        let r = row(vec![CLS, 6, 7, SEP], vec![]);
        let plan = plan_for(&r, 0.5, 16);
        assert!(m.forward_with_drop(&[CLS, 6, SEP], &plan, false).is_err());
    }

    #[test]
    #[ignore = "timing probe, run by hand"]
    fn step_time_probe() {
        let cfg = ModelConfig {
            l: 8,
            d: 256,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 256,
            max_seq: 256,
            drop_start: 1,
            drop_end: 7,
            keep_ratio: 0.5,
        };
        let m = Model::init(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ids = vec![CLS];
        ids.extend((0..254).map(|_| rng.gen_range(5..256)));
        ids.push(SEP);
        let masked: Vec<usize> = (1..255).filter(|_| rng.gen::<f64>() < 0.15).collect();
        let r = row(ids, masked.clone());
        let plan = plan_for(&r, 0.5, 256);

        for (label, drop) in [("full", false), ("full", false), ("drop", true), ("drop", true)] {
            let t0 = std::time::Instant::now();
            let out = if drop {
                m.forward_with_drop(&r.token_ids, &plan, false).unwrap()
            } else {
                m.forward_full(&r.token_ids, false).unwrap()
            };
            let fwd = t0.elapsed();
            let logits = m.mlm_head(&out.final_hidden.gather_rows(&masked).unwrap()).unwrap();
            let loss = logits.log_softmax_rows().unwrap().mean_all().unwrap();
            let t1 = std::time::Instant::now();
            loss.backward().unwrap();
            let bwd = t1.elapsed();
            println!("{label}: forward {:?}  backward {:?}", fwd, bwd);
        }
    }
}
