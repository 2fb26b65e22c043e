//! Checks on how thinking steps behave as an iterative refinement.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LayerKind, Model};
use crate::tensor::Tensor;

/// Least-squares line through `(k, ln e_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_log_decay(errors: &[f64]) -> Result<DecayFit> {
    if errors.len() < 2 || errors.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::Data("decay fit needs at least two positive finite errors".into()));
    }
    let n = errors.len() as f64;
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (k, y) in ys.iter().enumerate() {
        let dx = k as f64 - x_mean;
        let dy = y - y_mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(DecayFit {
        slope,
        intercept: y_mean - slope * x_mean,
        r_squared,
    })
}

/// Errors `|y_k - y*|` of `y_{k+1} = y_k + Δ(y_k)` with `Δ(y) = -κ·tanh(y - y*)`,
/// which shrinks the error by at least a factor `1 - κ·tanh(e0)/e0` per step.
pub fn contractive_refinement(y0: f64, target: f64, kappa: f64, steps: usize) -> Vec<f64> {
    let mut y = y0;
    let mut errors = Vec::with_capacity(steps + 1);
    errors.push((y - target).abs());
    for _ in 0..steps {
        y += -kappa * (y - target).tanh();
        errors.push((y - target).abs());
    }
    errors
}

fn thinking_block_grads(model: &Model<f64>, grads: &crate::model::ModelParams<Tensor<f64>>) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, b) in grads.blocks.iter().enumerate() {
        if model.config.layer_kind(i) == LayerKind::Thinking {
            for t in [&b.attn_norm, &b.wq, &b.wk, &b.wv, &b.wo, &b.mlp_norm, &b.w_gate, &b.w_up, &b.w_down] {
                out.extend_from_slice(t.data());
            }
        }
    }
    out
}

/// Relative gap `‖g - g₀‖ / ‖g‖` between the exact gradient of the shared
/// block weights of every inner-thinking layer and the gradient that flows
/// through the base pass only, after scaling every `φ_t` (`t ≥ 1`) by `sigma`.
pub fn first_order_gap(model: &Model<f64>, tokens: &[usize], sigma: f64) -> Result<f64> {
    let mut scaled = model.clone();
    for tp in scaled.params.thinking.iter_mut().flatten() {
        for phi in tp.step_encodings.iter_mut().skip(1) {
            *phi = phi.map(|v| v * sigma);
        }
    }
    if tokens.len() < 2 {
        return Err(Error::Data("need at least two tokens".into()));
    }
    let batch = [(tokens[..tokens.len() - 1].to_vec(), tokens[1..].to_vec())];
    let (_, exact) = scaled.loss_and_grads(&batch, &ForwardOptions::default())?;
    let detached = ForwardOptions {
        detach_extra_steps: true,
        ..Default::default()
    };
    let (_, base_only) = scaled.loss_and_grads(&batch, &detached)?;
    let g = thinking_block_grads(&scaled, &exact);
    let g0 = thinking_block_grads(&scaled, &base_only);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Data("exact gradient is zero".into()));
    }
    let diff = g.iter().zip(&g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / norm)
}
