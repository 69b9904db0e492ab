//! Adam with linear learning-rate warmup, optional cosine decay and
//! global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the run spent ramping the learning rate up from zero.
    pub warmup_fraction: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached by a
    /// cosine after warmup. 1 keeps the rate flat.
    pub final_lr_fraction: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.05,
            final_lr_fraction: 1.0,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.warmup_fraction)
            && (0.0..=1.0).contains(&self.final_lr_fraction)
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }

    /// Number of warmup steps for a run of `total` steps (at least 1).
    pub fn warmup_steps(&self, total: u64) -> u64 {
        ((self.warmup_fraction * total as f64).ceil() as u64).max(1)
    }

    /// Learning rate used by the update that produces step `step + 1`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let w = self.warmup_steps(total);
        if step + 1 <= w || self.final_lr_fraction == 1.0 {
            return self.lr * ((step + 1) as f64 / w as f64).min(1.0);
        }
        let span = total.saturating_sub(w).max(1) as f64;
        let p = ((step + 1 - w) as f64 / span).min(1.0);
        let f = self.final_lr_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Matrix]) -> Self {
        Self {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    /// Clips `grads` to the configured global norm and applies one update.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, cfg: &OptimConfig, params: &mut [Matrix], grads: &mut [Matrix], lr: f64) -> f64 {
        assert_eq!(params.len(), grads.len());
        let norm = grads
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            for g in grads.iter_mut() {
                g.scale_assign(s);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_fraction: 0.1,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..15).map(|s| cfg.lr_at(s, 100)).collect();
        for s in 0..10 {
            assert!((lrs[s] - (s + 1) as f64 / 10.0).abs() < 1e-15);
        }
        assert!(lrs[10..].iter().all(|&l| l == 1.0));
    }

    #[test]
    fn cosine_decay_hits_the_floor() {
        let cfg = OptimConfig {
            lr: 2.0,
            warmup_fraction: 0.1,
            final_lr_fraction: 0.25,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(9, 100), 2.0);
        // Halfway through the decay the cosine sits at its midpoint.
        assert!((cfg.lr_at(54, 100) - 2.0 * 0.625).abs() < 1e-12);
        assert!((cfg.lr_at(99, 100) - 0.5).abs() < 1e-12);
        let lrs: Vec<f64> = (9..100).map(|s| cfg.lr_at(s, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn first_update_moves_by_lr() {
        let cfg = OptimConfig {
            grad_clip: 0.0,
            ..Default::default()
        };
        let mut p = vec![Matrix::from_vec(1, 2, vec![1.0, -1.0])];
        let mut g = vec![Matrix::from_vec(1, 2, vec![0.5, -3.0])];
        let mut adam = Adam::new(&p);
        adam.step(&cfg, &mut p, &mut g, 0.1);
        assert!((p[0].get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p[0].get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimConfig::default();
        let mut p = vec![Matrix::from_vec(1, 1, vec![3.0])];
        let mut adam = Adam::new(&p);
        for _ in 0..5000 {
            let mut g = vec![Matrix::from_vec(1, 1, vec![2.0 * p[0].get(0, 0)])];
            adam.step(&cfg, &mut p, &mut g, 0.01);
        }
        assert!(p[0].get(0, 0).abs() < 1e-3);
    }
}
