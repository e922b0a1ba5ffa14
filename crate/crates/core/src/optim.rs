//! AdamW with decoupled weight decay, a linear warmup/decay learning-rate
//! schedule, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite update in tensor {0}")]
    NonFiniteUpdate(usize),
    #[error("shape mismatch in tensor {index}: parameter has {param} values, gradient {grad}")]
    ShapeMismatch { index: usize, param: usize, grad: usize },
    #[error("invalid schedule: warmup {warmup} exceeds total {total}")]
    BadSchedule { warmup: u64, total: u64 },
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            base_lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then linear decay to
/// 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(OptimError::BadSchedule {
                warmup: warmup_steps,
                total: total_steps,
            });
        }
        Ok(Self {
            warmup_steps,
            total_steps,
        })
    }

    /// Warmup of `ceil(fraction * total)` steps.
    pub fn with_warmup_fraction(total_steps: u64, fraction: f64) -> Self {
        let warmup = ((fraction * total_steps as f64).ceil() as u64).min(total_steps);
        Self {
            warmup_steps: warmup,
            total_steps,
        }
    }

    pub fn lr_at(&self, base_lr: f64, step: u64) -> f64 {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step >= t {
            0.0
        } else if step < w {
            base_lr * step as f64 / w as f64
        } else {
            base_lr * (t - step) as f64 / (t - w) as f64
        }
    }
}

/// Optimizer state; moment buffers align with the parameter tensors by index.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub hyper: AdamWHyper,
    pub schedule: Schedule,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl OptimState {
    pub fn new(params: &[Tensor], hyper: AdamWHyper, schedule: Schedule, clip_norm: Option<f64>) -> Self {
        let zeros = || params.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            hyper,
            schedule,
            clip_norm,
        }
    }

    /// Learning rate scheduled for `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.schedule.lr_at(self.hyper.base_lr, step)
    }

    /// Learning rate the next call to [`OptimState::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// Clip (when enabled) then update at the scheduled learning rate.
    /// Returns the learning rate used.
    pub fn step(&mut self, params: &mut [Tensor], grads: &mut [Vec<f64>], decay: &[bool]) -> Result<f64> {
        if let Some(c) = self.clip_norm {
            clip_global_norm(grads, c)?;
        } else if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient);
        }
        let lr = self.current_lr();
        adamw_update(params, grads, decay, self, lr)?;
        Ok(lr)
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients by `clip_norm / norm` when the global norm exceeds
/// `clip_norm`. Returns the scale applied (1.0 when untouched).
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip_norm: f64) -> Result<f64> {
    assert!(clip_norm > 0.0, "clip_norm must be positive");
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient);
    }
    let norm = global_norm(grads);
    if norm <= clip_norm {
        return Ok(1.0);
    }
    let scale = clip_norm / norm;
    for g in grads.iter_mut().flatten() {
        *g *= scale;
    }
    Ok(scale)
}

/// One AdamW step at learning rate `lr`. Advances `state.step` first, so bias
/// correction uses `t = state.step` after the increment. Weight decay acts on
/// the pre-update value, only where `decay[i]` is set.
pub fn adamw_update(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    decay: &[bool],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[index].len() != g.len() {
            return Err(OptimError::ShapeMismatch {
                index,
                param: p.numel(),
                grad: g.len(),
            });
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (index, p) in params.iter_mut().enumerate() {
        let wd = if decay.get(index).copied().unwrap_or(false) {
            h.weight_decay
        } else {
            0.0
        };
        let (m, v, g) = (&mut state.m[index], &mut state.v[index], &grads[index]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let next = *w - lr * m_hat / (v_hat.sqrt() + h.eps) - lr * wd * *w;
            if !next.is_finite() {
                return Err(OptimError::NonFiniteUpdate(index));
            }
            *w = next;
        }
    }
    Ok(())
}
