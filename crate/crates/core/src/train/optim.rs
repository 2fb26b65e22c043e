//! AdamW with decoupled weight decay, global-norm clipping and a cosine
//! schedule with linear warmup.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
        }
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let m: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Gradient norm before clipping.
    Applied { grad_norm: f64 },
    /// Gradients were non-finite; nothing changed.
    Skipped,
}

pub fn global_norm<F: Scalar>(grads: &[&Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    /// One update at learning rate `lr` (the schedule's value for this step).
    pub fn step<F: Scalar>(
        &self,
        params: &mut [&mut Tensor<F>],
        grads: &[&Tensor<F>],
        state: &mut OptimizerState<F>,
        lr: f64,
    ) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(shape_err(
                "adamw",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("adamw", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Ok(StepOutcome::Skipped);
        }
        let clip = match self.grad_clip {
            Some(max) if norm > max => F::of(max / norm),
            _ => F::one(),
        };
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::one() - b1.powi(t);
        let c2 = F::one() - b2.powi(t);
        let (lr, eps, decay) = (F::of(lr), F::of(self.eps), F::of(lr * self.weight_decay));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj * clip;
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w = *w - decay * *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied { grad_norm: norm })
    }
}

/// Linear warmup over `warmup` steps to `base`, then cosine decay to zero at `total`.
pub fn cosine_lr(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}
