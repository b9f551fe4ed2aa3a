use alloc::vec;
use alloc::vec::Vec;

use super::{ParamStore, Scalar};
use crate::error::{invalid, shape_err, Error, Result};

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed state with β1 = 0.9, β2 = 0.998, ε = 1e-8.
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_betas(params, 0.9, 0.998, 1e-8)
    }

    pub fn with_betas(params: &ParamStore<T>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.ids().map(|id| vec![T::zero(); params.get(id).len()]).collect::<Vec<_>>();
        Self { step: 0, first_moment: zeros(), second_moment: zeros(), beta1, beta2, epsilon }
    }

    pub fn matches(&self, params: &ParamStore<T>) -> bool {
        self.first_moment.len() == params.len()
            && self.second_moment.len() == params.len()
            && params.ids().all(|id| {
                let n = params.get(id).len();
                self.first_moment[id.0].len() == n && self.second_moment[id.0].len() == n
            })
    }
}

/// Applies one bias-corrected Adam update using the gradients stored on the
/// parameters, then increments the step counter. Parameters without a
/// gradient are treated as having a zero gradient. A non-finite gradient
/// rejects the whole step and leaves parameters and state untouched.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(invalid!("learning rate must be positive, got {}", lr));
    }
    if !state.matches(params) {
        return Err(shape_err!("adam_step", "optimizer state does not match the parameter shapes"));
    }
    for id in params.ids() {
        if let Some(g) = &params.get(id).grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adam_step gradient"));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let one = T::one();
    let corr1 = T::of(1.0 - num_traits::Float::powi(state.beta1, t));
    let corr2 = T::of(1.0 - num_traits::Float::powi(state.beta2, t));
    let eps = T::of(state.epsilon);
    let lr = T::of(lr);
    for id in params.ids() {
        let tensor = params.get_mut(id);
        let m = &mut state.first_moment[id.0];
        let v = &mut state.second_moment[id.0];
        let grad = tensor.grad.take();
        let data = tensor.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.grad = grad;
    }
    Ok(())
}

/// Rescales all stored gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for id in params.ids() {
        if let Some(g) = &params.get(id).grad {
            sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = num_traits::Float::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for id in params.ids() {
            if let Some(g) = &mut params.get_mut(id).grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    InverseSqrtWarmup,
    Constant,
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn inverse_sqrt(peak_lr: f64, warmup_steps: u64) -> Self {
        Self { peak_lr, warmup_steps, kind: ScheduleKind::InverseSqrtWarmup }
    }

    pub fn constant(lr: f64) -> Self {
        Self { peak_lr: lr, warmup_steps: 1, kind: ScheduleKind::Constant }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(invalid!("peak learning rate must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(invalid!("warmup steps must be positive"));
        }
        Ok(())
    }

    /// Learning rate at 1-based step `s`: linear warm-up to the peak, then
    /// decay with the inverse square root of the step.
    pub fn lr_at(&self, s: u64) -> Result<f64> {
        if s == 0 {
            return Err(invalid!("learning-rate steps are 1-based"));
        }
        self.validate()?;
        Ok(match self.kind {
            ScheduleKind::Constant => self.peak_lr,
            ScheduleKind::InverseSqrtWarmup => {
                let (s, w) = (s as f64, self.warmup_steps as f64);
                self.peak_lr * (s / w).min(num_traits::Float::sqrt(w / s))
            }
        })
    }
}
