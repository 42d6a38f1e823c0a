use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter moments, allocated lazily on first update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    pub m: Vec<Option<Vec<f32>>>,
    pub v: Vec<Option<Vec<f32>>>,
    pub step: u64,
    pub cfg: AdamWConfig,
}

impl OptimState {
    pub fn new(cfg: AdamWConfig) -> Self {
        OptimState {
            cfg,
            ..OptimState::default()
        }
    }
}

/// One decoupled-decay Adam update of a single tensor. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let p = param[i] as f64 * (1.0 - lr * wd);
        let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        param[i] = (p - lr * update) as f32;
    }
}

/// Applies one step to every parameter with a gradient. Weight decay only
/// touches [`ParamKind::Weight`] tensors.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut OptimState,
    lr: f64,
) -> Result<(), TrainError> {
    if state.m.len() < store.len() {
        state.m.resize(store.len(), None);
        state.v.resize(store.len(), None);
    }
    state.step += 1;
    let cfg = state.cfg;
    for (id, g) in grads {
        let kind = store.kind(*id);
        if !kind.trainable() {
            continue;
        }
        let p = store.get_mut(*id);
        if p.shape() != g.shape() {
            return Err(TrainError::Shape(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let n = p.len();
        let m = state.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
        let v = state.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
        adamw_update(p.data_mut(), g.data(), m, v, state.step, lr, &cfg, kind == ParamKind::Weight);
    }
    Ok(())
}

/// Linear warmup then cosine decay, indexed by optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    /// Learning rate scaled linearly with batch size against 1024.
    pub fn scaled_base_lr(batch_size: usize) -> f64 {
        1e-3 * batch_size as f64 / 1024.0
    }

    pub fn check(&self) -> Result<(), TrainError> {
        if !(self.min_lr <= self.base_lr) || self.min_lr < 0.0 {
            return Err(TrainError::Config(format!(
                "need 0 <= min_lr <= base_lr, got {} and {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs || self.steps_per_epoch == 0 {
            return Err(TrainError::Config(format!(
                "need warmup_epochs < total_epochs and steps per epoch > 0, got {} / {} / {}",
                self.warmup_epochs, self.total_epochs, self.steps_per_epoch
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    /// `0 → base_lr` over the warmup, then cosine down to `min_lr` at the
    /// last step; later steps stay at `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        let last = self.total_steps().saturating_sub(1);
        if step < w {
            return self.base_lr * step as f64 / w as f64;
        }
        if step >= last {
            return self.min_lr;
        }
        let p = (step - w) as f64 / (last - w) as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}
