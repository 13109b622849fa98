use serde::{Deserialize, Serialize};

use super::buffer::TokenBuffer;
use super::grad::{loss_and_grad, LossFn, LossReport};
use super::model::Model;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// AdamW with a linear warmup, then either a constant learning rate or a
/// cosine decay ending at `decay_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only, not to norm gains.
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Step at which the cosine decay bottoms out; `None` keeps the rate flat.
    pub decay_steps: Option<u64>,
    /// Floor of the decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            grad_clip: Some(1.0),
            decay_steps: None,
            min_lr_ratio: 0.1,
        }
    }
}

impl AdamW {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.decay_steps {
            Some(end) if end > self.warmup_steps => {
                let frac = ((step - self.warmup_steps) as f64 / (end - self.warmup_steps) as f64).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
            }
            _ => self.lr,
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Parameters<T>,
    pub v: Parameters<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> OptimizerState<U> {
        OptimizerState {
            step: self.step,
            m: self.m.cast(),
            v: self.v.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One optimizer step on the mean loss of `batch`.
///
/// Fails with [`Error::Diverged`] before touching the parameters if the loss
/// or the gradient is not finite.
pub fn train_step<T: Scalar, L: LossFn>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    hp: &AdamW,
    batch: &[(TokenBuffer, L)],
) -> Result<StepOutcome> {
    let step = state.step + 1;
    let out = loss_and_grad(model.config(), model.params(), batch)?;
    let grad_sq: f64 = out
        .grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum();
    let grad_norm = grad_sq.sqrt();
    if !out.loss.total.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Diverged {
            step,
            loss: out.loss.total,
        });
    }
    let clip = match hp.grad_clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    let lr = hp.lr_at(step);
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - hp.beta1), T::from_f64(1.0 - hp.beta2));
    let (lr_t, eps, clip_t) = (T::from_f64(lr), T::from_f64(hp.eps), T::from_f64(clip));
    let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));

    let params = model.params_mut().tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.iter_mut().zip(out.grads.tensors()).zip(ms).zip(vs) {
        let wd = T::from_f64(if p.shape.len() >= 2 { hp.weight_decay } else { 0.0 });
        for (((w, &gr), mi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            let gr = gr * clip_t;
            *mi = b1 * *mi + one_b1 * gr;
            *vi = b2 * *vi + one_b2 * gr * gr;
            let mhat = *mi * inv_bc1;
            let vhat = *vi * inv_bc2;
            *w -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * *w);
        }
    }
    state.step = step;
    Ok(StepOutcome {
        step,
        loss: out.loss,
        grad_norm,
        lr,
    })
}
