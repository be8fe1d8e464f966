use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Adam with decoupled weight decay and a linear-warmup /
/// inverse-square-root learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    /// Learning rate at 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Arc<Tensor>>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update. `grad_scale` multiplies every gradient first (loss
    /// normalization and clipping are folded into it). Missing gradients are
    /// treated as zero.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Arc<Tensor>>,
        grads: &[Option<Vec<f64>>],
        grad_scale: f64,
    ) {
        self.step += 1;
        let c = &self.config;
        let lr = c.lr(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.into_iter().enumerate() {
            let p = Arc::make_mut(p).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_deref();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j] * grad_scale);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= lr * (update + c.weight_decay * p[j]);
            }
        }
    }
}

/// Squared L2 norm over all present gradients.
pub fn grad_norm_sq(grads: &[Option<Vec<f64>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum()
}

/// Factor that rescales gradients of norm `norm` to at most `clip`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    }
}
