//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], cfg: AdamWConfig) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            cfg,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update over the same parameter list the optimizer was built with.
    /// Parameters without accumulated gradients are left untouched.
    pub fn step(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        let cfg = self.cfg.clone();
        for (i, p) in params.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut j = 0;
            p.update_values(|value, grad| {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *value -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *value);
                j += 1;
            });
        }
    }

    pub fn zero_grad(&self, params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}
