//! First-order optimizers over a `ParamSet`.
//!
//! Plain Adam with zero weight decay (the workspace never uses decoupled
//! decay, so AdamW with decay 0 collapses to this) and SGD for the trivial
//! cases. The cosine schedule mirrors the warmup-ratio-0.05 recipe used by
//! the training harness.

use crate::linalg::Matrix;
use crate::tape::ParamSet;

/// Plain stochastic gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    /// `value -= lr * grad` for every trainable param.
    pub fn step(&self, params: &mut ParamSet) {
        for p in params.iter_mut() {
            if p.trainable {
                p.value = p.value.sub(&p.grad.scale(self.lr));
            }
        }
    }
}

/// Adam with bias correction. Moment state is owned by the optimizer and
/// keyed by param order, so the `ParamSet` must not grow after construction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let m = params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        let v = params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m, v }
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        let lr = self.lr;
        self.step_with_lr(params, lr);
    }

    /// One Adam update at an externally scheduled learning rate.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        for (idx, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = &p.grad;
            self.m[idx] = self.m[idx].scale(self.beta1).add(&g.scale(1.0 - self.beta1));
            self.v[idx] = self.v[idx].scale(self.beta2).add(&g.hadamard(g).scale(1.0 - self.beta2));

            let mut update = Matrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let mh = self.m[idx].get(i, j) / bc1;
                    let vh = self.v[idx].get(i, j) / bc2;
                    update.set(i, j, lr * mh / (vh.sqrt() + self.eps));
                }
            }
            p.value = p.value.sub(&update);
        }
    }
}

/// Cosine decay with linear warmup over `warmup_ratio * total` steps.
/// `step` is zero-based; the returned factor multiplies the base rate.
pub fn cosine_lr(base_lr: f64, step: u64, total: u64, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let warmup = ((total as f64) * warmup_ratio).ceil() as u64;
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let denom = total.saturating_sub(warmup).max(1) as f64;
    let progress = (step.saturating_sub(warmup)) as f64 / denom;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
