//! Passive early-exit measurement: how many thinking steps each token needs
//! before the model's prediction is already good enough.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, Variant};
use crate::tensor::Scalar;
use crate::thinking::StepCapacity;
use crate::train::eval::token_nll;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitReport {
    pub epsilon: f64,
    /// Per token: the fewest extra steps after which its cross-entropy is
    /// below `epsilon`, or `None` if even the full model misses.
    pub first_step: Vec<Option<usize>>,
    /// `histogram[t]` counts tokens with `first_step == Some(t)`; the last
    /// entry counts `None`.
    pub histogram: Vec<usize>,
}

/// Capacities with every extra step after the first `t` removed.
pub fn truncated(capacities: &[StepCapacity], t: usize) -> Vec<StepCapacity> {
    capacities
        .iter()
        .enumerate()
        .map(|(i, &c)| if i < t { c } else { StepCapacity::Removed })
        .collect()
}

/// Runs the model with thinking truncated after `t = 0, 1, ..., T-1` extra
/// steps in every inner-thinking layer and applies the LM head to each
/// truncated result. `epsilon = f64::INFINITY` accepts every token at `t = 0`.
pub fn early_exit_probe<F: Scalar>(
    model: &Model<F>,
    input: &[usize],
    target: &[usize],
    epsilon: f64,
    capacities: Option<Vec<StepCapacity>>,
) -> Result<EarlyExitReport> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::Config(format!("epsilon {epsilon} must be non-negative")));
    }
    if input.len() != target.len() {
        return Err(Error::Data(format!("{} inputs, {} targets", input.len(), target.len())));
    }
    let base = match model.config.variant {
        Variant::Itt => capacities.unwrap_or_else(|| model.config.routing.active_capacities()),
        _ => Vec::new(),
    };
    let mut first_step = vec![None; input.len()];
    for t in 0..=base.len() {
        let opts = ForwardOptions::with_capacities(truncated(&base, t));
        let (logits, _) = model.logits(input, &opts)?;
        for (i, slot) in first_step.iter_mut().enumerate() {
            if slot.is_none() && token_nll(logits.row(i), target[i]) < epsilon {
                *slot = Some(t);
            }
        }
    }
    let mut histogram = vec![0; base.len() + 2];
    for s in &first_step {
        histogram[s.unwrap_or(base.len() + 1)] += 1;
    }
    Ok(EarlyExitReport {
        epsilon,
        first_step,
        histogram,
    })
}
