//! AdamW with decoupled weight decay, global-norm clipping and the cosine
//! learning-rate schedule.

use super::params::ParamStore;
use super::tape::Mat;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: vec![0; n_params],
        }
    }

    /// Apply one update. Parameters without a gradient or frozen in the
    /// store are left bit-unchanged.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        let c = self.cfg;
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            self.t[id] += 1;
            let t = self.t[id] as i32;
            let m = self.m[id].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.v[id].get_or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let p = store.value_mut(id);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p.data[k]);
            }
        }
    }
}

/// Scale gradients so their global 2-norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    norm
}

/// Cosine annealing from `lr0` at epoch 0 to `floor * lr0` at the last
/// epoch.
pub fn cosine_lr(lr0: f64, floor: f64, epoch: usize, n_epochs: usize) -> f64 {
    if n_epochs <= 1 {
        return lr0;
    }
    let f = epoch as f64 / (n_epochs - 1) as f64;
    let lo = floor * lr0;
    lo + 0.5 * (lr0 - lo) * (1.0 + (std::f64::consts::PI * f).cos())
}
