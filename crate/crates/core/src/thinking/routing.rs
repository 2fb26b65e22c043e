use crate::error::Result;
use crate::tensor::{Scalar, Var};

use super::params::RouterParams;
use super::policy::{Normalization, Selection};

/// Number of tokens a capacity `c` selects out of `n`: `ceil(c·n)`, at least one.
///
/// Products that land within a few ulps above an integer (`0.7 * 10`) are
/// treated as that integer.
pub fn selected_count(capacity: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let exact = capacity * n as f64;
    let slack = 4.0 * f64::EPSILON * exact.abs().max(1.0);
    let nearest = exact.round();
    let count = if (exact - nearest).abs() <= slack {
        nearest
    } else {
        exact.ceil()
    };
    (count as usize).clamp(1, n)
}

/// Router weights `normalize(Y·r + b)` for every row of `y`.
///
/// Returns `(weights [n], logits [n])`. The weights stay on the tape so the
/// router receives gradients through every place they scale a step output.
pub fn router_score<'t, F: Scalar>(
    y: &Var<'t, F>,
    router: &RouterParams<Var<'t, F>>,
    normalization: Normalization,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let n = y.shape()[0];
    let logits = y.matmul(&router.weight)?.add_row(&router.bias)?.reshape(&[n])?;
    let weights = match normalization {
        Normalization::Sigmoid => logits.sigmoid()?,
        Normalization::Tanh => logits.tanh()?,
    };
    Ok((weights, logits))
}

/// Whether a token takes another thinking step at decode time: strictly above
/// 0.5 for sigmoid weights, above 0 for tanh weights.
pub fn decode_gate(weight: f64, normalization: Normalization) -> bool {
    weight > normalization.threshold()
}

/// Descending weight, ties toward the smaller index.
fn ranked(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
}

/// Indices (ascending) of the tokens that take thinking step `t`.
pub fn select_tokens(
    weights: &[f64],
    selection: Selection,
    normalization: Normalization,
    capacity: f64,
    top_p: f64,
) -> Vec<usize> {
    let mut chosen = match selection {
        Selection::CapacityPercentile => {
            let mut order = ranked(weights);
            order.truncate(selected_count(capacity, weights.len()));
            order
        }
        Selection::Threshold => (0..weights.len())
            .filter(|&i| decode_gate(weights[i], normalization))
            .collect(),
        Selection::TopP => {
            let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
            let mut picked = Vec::new();
            if total > 0.0 {
                let mut mass = 0.0;
                for i in ranked(weights) {
                    if mass >= top_p {
                        break;
                    }
                    mass += weights[i].max(0.0) / total;
                    picked.push(i);
                }
            }
            picked
        }
    };
    chosen.sort_unstable();
    chosen
}
