use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DistillConfig;
use crate::error::{Error, Result};
use crate::model::ParamRegistry;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Adaptive moments with decoupled weight decay. One-dimensional tensors
/// (norm gains) are not decayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamRegistry, grads: &Gradients, lr: f64, clip: Option<f64>) -> Result<()> {
        let mut scale = 1.0;
        if let Some(max_norm) = clip {
            let sq: f64 = grads.by_name.values().flat_map(|g| g.data()).map(|x| x * x).sum();
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite { op: "grad_norm" });
            }
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, entry) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let w = &mut entry.tensor;
            if g.shape() != w.shape() {
                return Err(Error::ShapeMismatch { op: "adamw", shapes: vec![w.shape().to_vec(), g.shape().to_vec()] });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
            if m.shape() != w.shape() {
                return Err(Error::ShapeMismatch { op: "adamw_state", shapes: vec![w.shape().to_vec(), m.shape().to_vec()] });
            }
            let decay = if w.shape().len() > 1 { self.weight_decay } else { 0.0 };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi * scale;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *wi -= lr * (upd + decay * *wi);
            }
        }
        Ok(())
    }

    /// Drop moments for tensors whose shape changed or that no longer exist.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }
}

/// Linear warmup to `lr_peak`, then cosine decay to the floor at
/// `total_steps`; later steps stay at the floor.
pub fn cosine_lr(step: u64, cfg: &DistillConfig) -> f64 {
    let peak = cfg.lr_peak;
    let floor = peak * cfg.lr_floor_ratio;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 || step >= cfg.total_steps {
        return if step >= cfg.total_steps && span > 0 { floor } else { peak };
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// True once the mean of the last `window` losses improves on the mean of
/// the preceding window by a relative amount below `eps`.
pub fn plateau_early_stop(history: &[f64], window: usize, eps: f64) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let n = history.len();
    let cur = &history[n - window..];
    let prev = &history[n.saturating_sub(2 * window)..n - window];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (c, p) = (mean(cur), mean(prev));
    (p - c) / p.abs().max(f64::MIN_POSITIVE) < eps
}
