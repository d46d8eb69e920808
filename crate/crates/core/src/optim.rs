//! AdamW with linear-warmup/cosine-decay scheduling and global-norm
//! gradient clipping.

use crate::config::TrainConfig;
use crate::model::ParamSet;
use crate::tensor::Tensor;

/// Learning rate at `step`: linear ramp 0 → peak over `warmup_steps`, then
/// cosine decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns (pre-clip norm, applied scale).
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> (f64, f64) {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return (norm, 1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v = ((*v as f64) * scale) as f32;
        }
    }
    (norm, scale)
}

/// Decoupled-weight-decay Adam. Moments are stored per parameter in
/// registration order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<f32>> =
            params.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update: decoupled decay (p -= lr·wd·p), then bias-corrected
    /// Adam (p -= lr · m̂ / (√v̂ + eps)).
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.value_mut(crate::model::ParamId(i)).data_mut();
            debug_assert_eq!(g.len(), p.len());
            for j in 0..g.len() {
                let gj = g[j] as f64;
                let pj = p[j] as f64 * (1.0 - lr * self.weight_decay);
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                p[j] = (pj - update) as f32;
            }
        }
    }
}
