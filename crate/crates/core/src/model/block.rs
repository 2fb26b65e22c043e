//! LLaMA-style pre-norm block: `h = x + attn(norm(x))`, `out = h + mlp(norm(h))`.

use std::sync::Arc;

use super::params::BlockParams;
use crate::error::Result;
use crate::tensor::{RotaryTable, Scalar, Tensor, Var};

/// Static attention settings shared by every block of a model.
#[derive(Debug, Clone)]
pub struct AttentionSpec<F: Scalar> {
    pub n_heads: usize,
    pub rotary: Arc<RotaryTable<F>>,
}

/// Rotated keys and values of tokens already processed by one block application.
#[derive(Debug, Clone, Default)]
pub struct KvCache<F: Scalar> {
    pub keys: Option<Tensor<F>>,
    pub values: Option<Tensor<F>>,
}

impl<F: Scalar> KvCache<F> {
    pub fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Multi-head causal attention of `q` over `k`/`v` (all `[rows, d]`, already rotated).
/// With more keys than queries, the queries are the trailing positions.
pub fn attention_core<'t, F: Scalar>(
    q: &Var<'t, F>,
    k: &Var<'t, F>,
    v: &Var<'t, F>,
    n_heads: usize,
) -> Result<Var<'t, F>> {
    let d = q.shape()[1];
    let head_dim = d / n_heads;
    let scale = F::one() / F::of(head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.slice_cols(lo, hi)?;
        let kh_t = k.slice_cols(lo, hi)?.transpose()?;
        let vh = v.slice_cols(lo, hi)?;
        let probs = qh.matmul(&kh_t)?.scale(scale)?.causal_softmax()?;
        heads.push(probs.matmul(&vh)?);
    }
    Var::concat_cols(&heads)
}

/// `Wo · attention(norm(x))` for rows at `positions`, optionally extending `cache`.
pub fn attention_forward<'t, F: Scalar>(
    x: &Var<'t, F>,
    positions: &[usize],
    block: &BlockParams<Var<'t, F>>,
    spec: &AttentionSpec<F>,
    cache: Option<&mut KvCache<F>>,
) -> Result<Var<'t, F>> {
    let tape = x.tape();
    let h = x.rms_norm(&block.attn_norm)?;
    let q = h.matmul(&block.wq)?.rotary(&spec.rotary, positions, spec.n_heads)?;
    let k = h.matmul(&block.wk)?.rotary(&spec.rotary, positions, spec.n_heads)?;
    let v = h.matmul(&block.wv)?;
    let (k_all, v_all) = match cache {
        None => (k, v),
        Some(cache) => {
            let (k_all, v_all) = match (&cache.keys, &cache.values) {
                (Some(ck), Some(cv)) => (
                    Var::concat_rows(&[tape.constant(ck.clone()), k])?,
                    Var::concat_rows(&[tape.constant(cv.clone()), v])?,
                ),
                _ => (k, v),
            };
            cache.keys = Some(k_all.value());
            cache.values = Some(v_all.value());
            (k_all, v_all)
        }
    };
    attention_core(&q, &k_all, &v_all, spec.n_heads)?.matmul(&block.wo)
}

/// SwiGLU feed-forward `down(silu(x·gate) ⊙ (x·up))`, no normalization.
pub fn mlp_forward<'t, F: Scalar>(x: &Var<'t, F>, block: &BlockParams<Var<'t, F>>) -> Result<Var<'t, F>> {
    let gate = x.matmul(&block.w_gate)?.silu()?;
    let up = x.matmul(&block.w_up)?;
    gate.mul(&up)?.matmul(&block.w_down)
}

/// One full residual block; this is the per-step transformation of a layer.
pub fn block_forward<'t, F: Scalar>(
    x: &Var<'t, F>,
    positions: &[usize],
    block: &BlockParams<Var<'t, F>>,
    spec: &AttentionSpec<F>,
    cache: Option<&mut KvCache<F>>,
) -> Result<Var<'t, F>> {
    let h = x.add(&attention_forward(x, positions, block, spec, cache)?)?;
    let normed = h.rms_norm(&block.mlp_norm)?;
    h.add(&mlp_forward(&normed, block)?)
}

/// Applies the same block `steps` times; each application keeps its own cache.
pub fn loop_layer_forward<'t, F: Scalar>(
    x: &Var<'t, F>,
    positions: &[usize],
    block: &BlockParams<Var<'t, F>>,
    spec: &AttentionSpec<F>,
    steps: usize,
    mut caches: Option<&mut [KvCache<F>]>,
) -> Result<Var<'t, F>> {
    let mut y = *x;
    for step in 0..steps.max(1) {
        let cache = caches.as_deref_mut().map(|c| &mut c[step]);
        y = block_forward(&y, positions, block, spec, cache)?;
    }
    Ok(y)
}
