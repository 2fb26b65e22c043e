//! The inner-thinking layer.
//!
//! ```text
//! Y0      = f(X)                                   (all tokens)
//! state   = Y0
//! acc     = Y0 ⊙ φ0
//! for t in 1..T:
//!     w   = normalize(state · r_t + b_t)
//!     S   = select(w)
//!     Y't = state, with rows i ∈ S replaced by α_t · w_i · f(state[S])_i
//!     acc = acc + Y't ⊙ φt
//!     state = acc
//! output = acc
//! ```
//!
//! `f(state[S])` runs the block on the selected rows only, as a shorter causal
//! sequence that keeps the tokens' original rotary positions.

use serde::{Deserialize, Serialize};

use super::params::{RouterParams, ThinkingParams};
use super::policy::{Reweighting, RoutingPolicy, Selection, StepCapacity};
use super::routing::{decode_gate, router_score, select_tokens};
use crate::error::{shape_err, Result};
use crate::model::block::{block_forward, AttentionSpec, KvCache};
use crate::model::params::BlockParams;
use crate::probes::flops::{block_flops, router_flops};
use crate::tensor::{Scalar, Var};

/// Which rule picks tokens for the extra steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    /// The routing policy's selection rule over the whole sequence.
    Policy,
    /// Per-token threshold, usable during incremental decoding.
    Threshold,
}

/// Routing decisions of one extra step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// `None` when the step was removed.
    pub capacity: Option<f64>,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub tokens: usize,
    pub steps: Vec<StepTrace>,
    /// Matmul FLOPs spent by this layer, routers included.
    pub flops: u64,
}

/// Routing decisions of a whole forward pass, one entry per inner-thinking layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layers: Vec<LayerTrace>,
}

/// Everything an inner-thinking layer needs besides its weights.
#[derive(Debug, Clone, Copy)]
pub struct ThinkingContext<'a, F: Scalar> {
    pub layer: usize,
    pub spec: &'a AttentionSpec<F>,
    pub policy: &'a RoutingPolicy,
    /// One entry per extra step.
    pub capacities: &'a [StepCapacity],
    pub gating: Gating,
    pub positions: &'a [usize],
    /// Cut extra steps (their inputs and their copy of the block weights) from
    /// the gradient path, leaving only the base pass to train the block.
    pub detach_extra_steps: bool,
}

fn to_f64<F: Scalar>(v: &Var<'_, F>) -> Vec<f64> {
    v.value().to_f64_vec()
}

/// One routed extra step `t ≥ 1` on the running state.
///
/// Rows outside the selection are copied from `state` untouched (only-select)
/// or scaled by `1 - w` (symmetric).
#[allow(clippy::too_many_arguments)]
pub fn atr_step<'t, F: Scalar>(
    state: &Var<'t, F>,
    step: usize,
    capacity: f64,
    block: &BlockParams<Var<'t, F>>,
    router: &RouterParams<Var<'t, F>>,
    ctx: &ThinkingContext<'_, F>,
    cache: Option<&mut KvCache<F>>,
) -> Result<(Var<'t, F>, StepTrace)> {
    let policy = ctx.policy;
    let (weights, logits) = router_score(state, router, policy.normalization)?;
    let w = to_f64(&weights);
    let selected = match (ctx.gating, policy.selection) {
        (Gating::Threshold, _) | (Gating::Policy, Selection::Threshold) => (0..w.len())
            .filter(|&i| decode_gate(w[i], policy.normalization))
            .collect(),
        (Gating::Policy, selection) => {
            select_tokens(&w, selection, policy.normalization, capacity, policy.top_p)
        }
    };

    let base = match policy.reweighting {
        Reweighting::OnlySelect => *state,
        Reweighting::Symmetric => state.mul_col(&weights.scale(-F::one())?.add_scalar(F::one())?)?,
    };
    let out = if selected.is_empty() {
        base
    } else {
        let positions: Vec<usize> = selected.iter().map(|&i| ctx.positions[i]).collect();
        let refined = block_forward(&state.gather_rows(&selected)?, &positions, block, ctx.spec, cache)?;
        let alpha = F::of(policy.alpha(step - 1));
        let update = refined.mul_col(&weights.gather_rows(&selected)?)?.scale(alpha)?;
        base.scatter_rows(&selected, &update)?
    };
    let trace = StepTrace {
        step,
        capacity: Some(capacity),
        selected,
        scores: to_f64(&logits),
        weights: w,
    };
    Ok((out, trace))
}

/// `Y0 ⊙ φ0 + Σ_t Y't ⊙ φt`, accumulated left to right.
pub fn rtc_combine<'t, F: Scalar>(
    base: &Var<'t, F>,
    step_outputs: &[Var<'t, F>],
    encodings: &[Var<'t, F>],
) -> Result<Var<'t, F>> {
    if encodings.len() != step_outputs.len() + 1 {
        return Err(shape_err(
            "rtc_combine",
            format!("{} step outputs need {} encodings, got {}", step_outputs.len(), step_outputs.len() + 1, encodings.len()),
        ));
    }
    let mut acc = base.mul_row(&encodings[0])?;
    for (y, phi) in step_outputs.iter().zip(&encodings[1..]) {
        acc = acc.add(&y.mul_row(phi)?)?;
    }
    Ok(acc)
}

/// Full inner-thinking layer. `caches`, when given, holds one cache per step
/// (base pass first) and is extended with the rows each step processes.
pub fn itt_layer_forward<'t, F: Scalar>(
    x: &Var<'t, F>,
    block: &BlockParams<Var<'t, F>>,
    thinking: &ThinkingParams<Var<'t, F>>,
    ctx: &ThinkingContext<'_, F>,
    mut caches: Option<&mut [KvCache<F>]>,
) -> Result<(Var<'t, F>, LayerTrace)> {
    let extra = thinking.extra_steps();
    if ctx.capacities.len() != extra || thinking.step_encodings.len() != extra + 1 {
        return Err(shape_err(
            "itt_layer",
            format!(
                "{extra} extra steps with {} capacities and {} encodings",
                ctx.capacities.len(),
                thinking.step_encodings.len()
            ),
        ));
    }
    let n = x.shape()[0];
    let d = x.shape()[1];
    let hidden = block.w_gate.shape()[1];
    let per_token = block_flops(d, hidden, n) / n.max(1) as u64;

    let y0 = block_forward(x, ctx.positions, block, ctx.spec, caches.as_deref_mut().map(|c| &mut c[0]))?;
    let mut acc = y0.mul_row(&thinking.step_encodings[0])?;
    let mut state = y0;
    let mut flops = block_flops(d, hidden, n);
    let mut steps = Vec::with_capacity(extra);

    let detached_block;
    let step_block = if ctx.detach_extra_steps {
        detached_block = block.map(|v| v.detach());
        &detached_block
    } else {
        block
    };

    for t in 1..=extra {
        let capacity = match ctx.capacities[t - 1] {
            StepCapacity::Active(c) => c,
            StepCapacity::Removed => {
                steps.push(StepTrace {
                    step: t,
                    capacity: None,
                    selected: Vec::new(),
                    scores: Vec::new(),
                    weights: Vec::new(),
                });
                continue;
            }
        };
        let input = if ctx.detach_extra_steps { state.detach() } else { state };
        let cache = caches.as_deref_mut().map(|c| &mut c[t]);
        let (y_t, trace) = atr_step(&input, t, capacity, step_block, &thinking.routers[t - 1], ctx, cache)?;
        flops += router_flops(d, n) + trace.selected.len() as u64 * per_token;
        steps.push(trace);
        acc = acc.add(&y_t.mul_row(&thinking.step_encodings[t])?)?;
        state = acc;
    }
    Ok((
        acc,
        LayerTrace {
            layer: ctx.layer,
            tokens: n,
            steps,
            flops,
        },
    ))
}
