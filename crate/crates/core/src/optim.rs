//! Adam and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Model};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
    t: i32,
}

impl Adam {
    pub fn new(model: &Model, cfg: AdamConfig) -> Self {
        let zeros = || model.params().iter().map(|p| Tensor2D::zeros(p.rows(), p.cols())).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f32) -> Result<()> {
        if grads.tensors.len() != model.num_params() || self.m.len() != model.num_params() {
            return Err(Error::InvalidParameter(format!(
                "optimizer state for {} tensors, gradients for {}, model has {}",
                self.m.len(),
                grads.tensors.len(),
                model.num_params()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in model.params_mut().iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = flush_subnormal(beta1 * m[i] + (1.0 - beta1) * g[i]);
                v[i] = flush_subnormal(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]);
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] -= lr * (update + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Zero for subnormal input; masked positions otherwise decay into that range.
#[inline]
fn flush_subnormal(x: f32) -> f32 {
    if x.is_subnormal() {
        0.0
    } else {
        x
    }
}

/// Linear warmup over the first `warmup_frac` of `total` steps, then linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f32,
    pub total: usize,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn new(peak: f32, total: usize, warmup_frac: f64) -> Self {
        let warmup = ((total as f64) * warmup_frac).round() as usize;
        Self { peak, total, warmup }
    }

    /// Learning rate for 0-based `step`.
    pub fn at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.peak * (step + 1) as f32 / self.warmup as f32;
        }
        let rest = self.total.saturating_sub(self.warmup).max(1);
        let done = step.saturating_sub(self.warmup);
        self.peak * (1.0 - done as f32 / rest as f32).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::RngState;

    fn small() -> Model {
        let cfg = ModelConfig { num_layers: 1, hidden: 8, num_heads: 2, ffn: 16, vocab: 10, max_len: 8, ..Default::default() };
        Model::new(cfg, &mut RngState::new(1)).unwrap()
    }

    #[test]
    fn zero_gradient_step_leaves_weights_unchanged() {
        let mut m = small();
        let before = m.params().to_vec();
        let mut opt = Adam::new(&m, AdamConfig::default());
        let g = Gradients::zeros_like(&m);
        for _ in 0..5 {
            opt.step(&mut m, &g, 1e-3).unwrap();
        }
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut m = small();
        let before = m.param(0).get(0, 0);
        let mut g = Gradients::zeros_like(&m);
        g.tensors[0].set(0, 0, 0.5);
        let mut opt = Adam::new(&m, AdamConfig::default());
        opt.step(&mut m, &g, 0.01).unwrap();
        assert!((m.param(0).get(0, 0) - (before - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn warmup_then_decay() {
        let s = LrSchedule::new(1.0, 100, 0.1);
        assert!((s.at(0) - 0.1).abs() < 1e-6);
        assert!((s.at(9) - 1.0).abs() < 1e-6);
        assert!(s.at(50) < 1.0 && s.at(50) > 0.0);
        assert_eq!(s.at(100), 0.0);
        assert!((0..99).all(|i| i < 9 || s.at(i + 1) <= s.at(i)));
    }
}
