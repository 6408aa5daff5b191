//! AdamW with decoupled weight decay, plus the linear warmup / linear decay
//! learning-rate schedule.
//!
//! Moments live outside the tensors, in the same fixed order as the named
//! parameter listing, so the optimizer state serializes as plain blocks.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Desk-scale defaults: warmup over the first 6% of steps.
    pub fn desk(total_steps: u64, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: 3e-4,
            warmup_steps: (total_steps as f64 * 0.06).ceil() as u64,
            total_steps,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        // strict: the schedule must reach peak_lr and then reach zero
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at 1-based step `t`: linear up to `peak_lr` over the warmup,
/// then linear down to exactly zero at `total_steps`.
pub fn lr_at(cfg: &OptimizerConfig, t: u64) -> f64 {
    if t <= cfg.warmup_steps {
        return cfg.peak_lr * t as f64 / cfg.warmup_steps as f64;
    }
    if t >= cfg.total_steps {
        return 0.0;
    }
    cfg.peak_lr * (cfg.total_steps - t) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64
}

/// Decoupled-weight-decay Adam. Decay applies only to parameters whose
/// listing entry carries the decay flag (weight matrices and embeddings, not
/// biases or layer-norm parameters).
pub struct AdamW {
    pub cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, named: &[(String, Tensor, bool)]) -> Result<AdamW> {
        cfg.validate()?;
        let m = named.iter().map(|(_, t, _)| vec![0.0; t.numel()]).collect();
        let v = named.iter().map(|(_, t, _)| vec![0.0; t.numel()]).collect();
        Ok(AdamW { cfg, m, v })
    }

    /// One update over all parameters. `grads` parallels `named`; `t` is the
    /// 1-based step, driving both bias correction and the schedule. Returns
    /// the learning rate that was applied.
    pub fn step(
        &mut self,
        named: &[(String, Tensor, bool)],
        grads: &[Vec<f64>],
        t: u64,
    ) -> Result<f64> {
        if named.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} parameters, got {} tensors and {} gradients",
                self.m.len(),
                named.len(),
                grads.len()
            )));
        }
        if t == 0 {
            return Err(Error::Contract("optimizer steps count from 1".into()));
        }
        assert!(t <= i32::MAX as u64, "step count exceeds bias-correction range");
        let lr = lr_at(&self.cfg, t);
        let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for (i, (name, tensor, decay)) in named.iter().enumerate() {
            let g = &grads[i];
            if g.len() != tensor.numel() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    tensor.numel()
                )));
            }
            let mut data = tensor.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if *decay { self.cfg.weight_decay } else { 0.0 };
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.cfg.eps);
                data[j] -= lr * (update + wd * data[j]);
            }
            tensor.set_data(&data)?;
        }
        Ok(lr)
    }

    /// Moment blocks in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(
        cfg: OptimizerConfig,
        named: &[(String, Tensor, bool)],
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<AdamW> {
        cfg.validate()?;
        if m.len() != named.len() || v.len() != named.len() {
            return Err(Error::Input("optimizer moment count mismatch".into()));
        }
        for (i, (name, t, _)) in named.iter().enumerate() {
            if m[i].len() != t.numel() || v[i].len() != t.numel() {
                return Err(Error::Input(format!("moment size mismatch for {name}")));
            }
        }
        Ok(AdamW { cfg, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: 3e-4,
            warmup_steps: 60,
            total_steps: 1000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            seed: 1,
        }
    }

    #[test]
    fn schedule_is_piecewise_linear() {
        let c = cfg();
        // closed form written out independently of lr_at
        let want = |t: u64| -> f64 {
            if t <= 60 {
                3e-4 * (t as f64 / 60.0)
            } else if t < 1000 {
                3e-4 * ((1000 - t) as f64 / 940.0)
            } else {
                0.0
            }
        };
        for t in [1, 17, 30, 59, 60, 61, 200, 530, 999, 1000, 1500] {
            let got = lr_at(&c, t);
            assert!((got - want(t)).abs() < 1e-18, "t={t}: {got} vs {}", want(t));
        }
    }

    #[test]
    fn schedule_endpoints_are_exact() {
        let c = cfg();
        assert_eq!(lr_at(&c, 60), 3e-4);
        assert_eq!(lr_at(&c, 1000), 0.0);
        assert!(lr_at(&c, 1) > 0.0);
    }

    #[test]
    fn config_rejects_out_of_range_values() {
        let ok = cfg();
        assert!(ok.validate().is_ok());
        let cases: Vec<Box<dyn Fn(&mut OptimizerConfig)>> = vec![
            Box::new(|c| c.peak_lr = 0.0),
            Box::new(|c| c.peak_lr = -1e-4),
            Box::new(|c| c.peak_lr = f64::NAN),
            Box::new(|c| c.total_steps = 0),
            Box::new(|c| c.warmup_steps = 1000),
            Box::new(|c| c.warmup_steps = 1001),
            Box::new(|c| c.beta1 = 1.0),
            Box::new(|c| c.beta2 = -0.1),
            Box::new(|c| c.eps = 0.0),
            Box::new(|c| c.weight_decay = -0.01),
            Box::new(|c| c.batch_size = 0),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut c = cfg();
            mutate(&mut c);
            assert!(c.validate().is_err(), "case {i} slipped through");
        }
    }

    fn named_pair() -> Vec<(String, Tensor, bool)> {
        vec![
            ("w".into(), Tensor::param(vec![0.5, -1.25], &[2]).unwrap(), true),
            ("b".into(), Tensor::param(vec![0.75], &[1]).unwrap(), false),
        ]
    }

    #[test]
    fn two_steps_match_a_hand_rolled_reference() {
        let named = named_pair();
        let mut opt = AdamW::new(cfg(), &named).unwrap();
        let g1 = vec![vec![0.3, -0.7], vec![0.1]];
        let g2 = vec![vec![-0.2, 0.4], vec![0.05]];
        opt.step(&named, &g1, 1).unwrap();
        opt.step(&named, &g2, 2).unwrap();

        // independent scalar recomputation
        let c = cfg();
        let reference = |x0: f64, g: [f64; 2], decay: bool| -> f64 {
            let (mut x, mut m, mut v) = (x0, 0.0f64, 0.0f64);
            for (k, &gk) in g.iter().enumerate() {
                let t = (k + 1) as i32;
                m = c.beta1 * m + (1.0 - c.beta1) * gk;
                v = c.beta2 * v + (1.0 - c.beta2) * gk * gk;
                let mhat = m / (1.0 - c.beta1.powi(t));
                let vhat = v / (1.0 - c.beta2.powi(t));
                let wd = if decay { c.weight_decay } else { 0.0 };
                x -= lr_at(&c, t as u64) * (mhat / (vhat.sqrt() + c.eps) + wd * x);
            }
            x
        };
        let w = named[0].1.to_vec();
        assert_eq!(w[0].to_bits(), reference(0.5, [0.3, -0.2], true).to_bits());
        assert_eq!(w[1].to_bits(), reference(-1.25, [-0.7, 0.4], true).to_bits());
        let b = named[1].1.to_vec();
        assert_eq!(b[0].to_bits(), reference(0.75, [0.1, 0.05], false).to_bits());
    }

    #[test]
    fn decay_flag_gates_the_weight_decay() {
        let named = named_pair();
        let mut opt = AdamW::new(cfg(), &named).unwrap();
        // zero gradient: moments stay zero, so the Adam term vanishes and
        // only decay can move a parameter
        let zeros = vec![vec![0.0, 0.0], vec![0.0]];
        opt.step(&named, &zeros, 1).unwrap();
        let c = cfg();
        let lr = lr_at(&c, 1);
        let w = named[0].1.to_vec();
        assert_eq!(w[0].to_bits(), (0.5 - lr * (c.weight_decay * 0.5)).to_bits());
        let b = named[1].1.to_vec();
        assert_eq!(b[0].to_bits(), 0.75f64.to_bits(), "undecayed parameter moved");
    }

    #[test]
    fn moments_round_trip_and_validate() {
        let named = named_pair();
        let mut opt = AdamW::new(cfg(), &named).unwrap();
        opt.step(&named, &vec![vec![0.3, -0.7], vec![0.1]], 1).unwrap();
        let (m, v) = opt.moments();
        let rebuilt = AdamW::from_parts(cfg(), &named, m.to_vec(), v.to_vec()).unwrap();
        let (m2, v2) = rebuilt.moments();
        assert_eq!(m, m2);
        assert_eq!(v, v2);
        assert!(AdamW::from_parts(cfg(), &named, m.to_vec(), vec![vec![0.0]]).is_err());
        assert!(AdamW::from_parts(cfg(), &named, vec![vec![0.0; 2], vec![0.0; 3]], v.to_vec())
            .is_err());
    }

    #[test]
    fn updates_are_reproducible() {
        let run = || {
            let named = named_pair();
            let mut opt = AdamW::new(cfg(), &named).unwrap();
            for t in 1..=10u64 {
                let g = vec![vec![0.01 * t as f64, -0.02], vec![0.005]];
                opt.step(&named, &g, t).unwrap();
            }
            (named[0].1.to_vec(), named[1].1.to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn step_rejects_mismatched_shapes_and_t_zero() {
        let named = named_pair();
        let mut opt = AdamW::new(cfg(), &named).unwrap();
        assert!(opt.step(&named, &vec![vec![0.0, 0.0]], 1).is_err());
        assert!(opt.step(&named, &vec![vec![0.0], vec![0.0]], 1).is_err());
        assert!(opt.step(&named, &vec![vec![0.0, 0.0], vec![0.0]], 0).is_err());
    }
}
