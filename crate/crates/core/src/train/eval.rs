use serde::Serialize;

use super::data::chunk;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::probes::flops::count_flops;
use crate::tensor::Scalar;
use crate::thinking::StepCapacity;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// Mean token cross-entropy in nats.
    pub loss: f64,
    pub ppl: f64,
    pub tokens: usize,
    /// Forward FLOPs per token at the evaluated capacities.
    pub flops_per_token: f64,
}

/// `-log softmax(logits_row)[target]`, computed in 64-bit.
pub fn token_nll<F: Scalar>(logits_row: &[F], target: usize) -> f64 {
    let row: Vec<f64> = logits_row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    log_z - row[target]
}

/// Perplexity over the non-overlapping `seq_len` windows of `ids`, at most
/// `max_windows` of them. `capacities` overrides the configured ones.
pub fn evaluate_perplexity<F: Scalar>(
    model: &Model<F>,
    ids: &[usize],
    seq_len: usize,
    max_windows: Option<usize>,
    capacities: Option<Vec<StepCapacity>>,
) -> Result<EvalResult> {
    let mut windows = chunk(ids, seq_len)?;
    if let Some(m) = max_windows {
        windows.truncate(m.max(1));
    }
    let opts = ForwardOptions {
        capacities: capacities.clone(),
        ..Default::default()
    };
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (input, target) in &windows {
        let (logits, _) = model.logits(input, &opts)?;
        for (i, &t) in target.iter().enumerate() {
            total += token_nll(logits.row(i), t);
        }
        tokens += target.len();
    }
    if tokens == 0 {
        return Err(Error::Data("no evaluation tokens".into()));
    }
    let loss = total / tokens as f64;
    let caps = capacities.unwrap_or_else(|| model.config.routing.active_capacities());
    let caps = if model.config.variant == crate::model::Variant::Itt { caps } else { Vec::new() };
    let flops = count_flops(&model.config, &caps, seq_len)?;
    Ok(EvalResult {
        loss,
        ppl: loss.exp(),
        tokens,
        flops_per_token: flops.total() as f64 / seq_len as f64,
    })
}
