//! Finite-difference verification of every differentiable operation, the
//! transformer block, the loop layer and the inner-thinking layer.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{block_forward, loop_layer_forward, AttentionSpec, BlockParams};
use crate::tensor::{grad_check, RotaryTable, Tape, Tensor, Var};
use crate::thinking::{
    itt_layer_forward, Gating, Normalization, Reweighting, RouterParams, RoutingPolicy, StepCapacity,
    ThinkingContext, ThinkingParams,
};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LAYER_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl fmt::Display for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<24} seed {} max rel err {:.3e} (tol {:.0e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.seed,
            self.error,
            self.tolerance
        )
    }
}

type Fun = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    shapes: Vec<Vec<usize>>,
    f: Fun,
}

fn op(name: &'static str, shapes: &[&[usize]], f: Fun) -> Case {
    Case {
        name,
        tolerance: OP_TOLERANCE,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f,
    }
}

const D: usize = 8;
const HEADS: usize = 2;
const HIDDEN: usize = 16;
const N: usize = 6;
const T: usize = 3;

fn spec() -> AttentionSpec<f64> {
    AttentionSpec {
        n_heads: HEADS,
        rotary: Arc::new(RotaryTable::new(D / HEADS, 32, 10_000.0)),
    }
}

fn block_shapes() -> Vec<Vec<usize>> {
    vec![
        vec![D],
        vec![D, D],
        vec![D, D],
        vec![D, D],
        vec![D, D],
        vec![D],
        vec![D, HIDDEN],
        vec![D, HIDDEN],
        vec![HIDDEN, D],
    ]
}

fn block_of<'t>(v: &[Var<'t, f64>]) -> BlockParams<Var<'t, f64>> {
    BlockParams {
        attn_norm: v[0],
        wq: v[1],
        wk: v[2],
        wv: v[3],
        wo: v[4],
        mlp_norm: v[5],
        w_gate: v[6],
        w_up: v[7],
        w_down: v[8],
    }
}

fn positions() -> Vec<usize> {
    (0..N).collect()
}

fn thinking_of<'t>(v: &[Var<'t, f64>]) -> ThinkingParams<Var<'t, f64>> {
    ThinkingParams {
        step_encodings: v[..T].to_vec(),
        routers: (0..T - 1)
            .map(|k| RouterParams {
                weight: v[T + 2 * k],
                bias: v[T + 2 * k + 1],
            })
            .collect(),
    }
}

fn itt<'t>(v: &[Var<'t, f64>], policy: &RoutingPolicy) -> Result<Var<'t, f64>> {
    let spec = spec();
    let pos = positions();
    let caps = vec![StepCapacity::Active(0.5); T - 1];
    let ctx = ThinkingContext {
        layer: 0,
        spec: &spec,
        policy,
        capacities: &caps,
        gating: Gating::Policy,
        positions: &pos,
        detach_extra_steps: false,
    };
    Ok(itt_layer_forward(&v[0], &block_of(&v[1..10]), &thinking_of(&v[10..]), &ctx, None)?.0)
}

fn itt_shapes() -> Vec<Vec<usize>> {
    let mut s = vec![vec![N, D]];
    s.extend(block_shapes());
    s.extend((0..T).map(|_| vec![D]));
    for _ in 0..T - 1 {
        s.push(vec![D, 1]);
        s.push(vec![1]);
    }
    s
}

fn cases() -> Vec<Case> {
    let mut cases = vec![
        op("matmul", &[&[3, 4], &[4, 5]], |_, v| v[0].matmul(&v[1])),
        op("transpose", &[&[3, 4]], |_, v| v[0].transpose()),
        op("add", &[&[3, 4], &[3, 4]], |_, v| v[0].add(&v[1])),
        op("sub", &[&[3, 4], &[3, 4]], |_, v| v[0].sub(&v[1])),
        op("mul", &[&[3, 4], &[3, 4]], |_, v| v[0].mul(&v[1])),
        op("add_row", &[&[3, 4], &[4]], |_, v| v[0].add_row(&v[1])),
        op("mul_row", &[&[3, 4], &[4]], |_, v| v[0].mul_row(&v[1])),
        op("mul_col", &[&[3, 4], &[3]], |_, v| v[0].mul_col(&v[1])),
        op("scale", &[&[3, 4]], |_, v| v[0].scale(-1.7)),
        op("add_scalar", &[&[3, 4]], |_, v| v[0].add_scalar(0.3)),
        op("reshape", &[&[3, 4]], |_, v| v[0].reshape(&[2, 6])),
        op("sum", &[&[3, 4]], |_, v| v[0].sum()),
        op("mean", &[&[3, 4]], |_, v| v[0].mean()),
        op("softmax", &[&[3, 5]], |_, v| v[0].softmax()),
        op("causal_softmax", &[&[4, 4]], |_, v| v[0].causal_softmax()),
        op("rms_norm", &[&[3, 6], &[6]], |_, v| v[0].rms_norm(&v[1])),
        op("silu", &[&[3, 4]], |_, v| v[0].silu()),
        op("sigmoid", &[&[3, 4]], |_, v| v[0].sigmoid()),
        op("tanh", &[&[3, 4]], |_, v| v[0].tanh()),
        op("embedding", &[&[5, 3]], |_, v| v[0].embedding(&[4, 0, 4, 2])),
        op("gather_rows", &[&[5, 3]], |_, v| v[0].gather_rows(&[3, 1, 3])),
        op("scatter_add_rows", &[&[3, 2]], |_, v| v[0].scatter_add_rows(&[4, 0, 4], 5)),
        op("scatter_rows", &[&[5, 3], &[2, 3]], |_, v| v[0].scatter_rows(&[1, 3], &v[1])),
        op("slice_cols", &[&[3, 6]], |_, v| v[0].slice_cols(2, 5)),
        op("concat_cols", &[&[3, 2], &[3, 4]], |_, v| Var::concat_cols(&v[..2])),
        op("concat_rows", &[&[2, 3], &[4, 3]], |_, v| Var::concat_rows(&v[..2])),
        op("rotary", &[&[4, 8]], |_, v| v[0].rotary(&spec().rotary, &[0, 3, 5, 9], HEADS)),
        op("cross_entropy", &[&[4, 7]], |_, v| v[0].cross_entropy(&[6, 0, 3, 3])),
    ];

    let mut block_in = vec![vec![N, D]];
    block_in.extend(block_shapes());
    cases.push(Case {
        name: "block_forward",
        tolerance: OP_TOLERANCE,
        shapes: block_in.clone(),
        f: |_, v| block_forward(&v[0], &positions(), &block_of(&v[1..]), &spec(), None),
    });
    cases.push(Case {
        name: "loop_layer",
        tolerance: OP_TOLERANCE,
        shapes: block_in,
        f: |_, v| loop_layer_forward(&v[0], &positions(), &block_of(&v[1..]), &spec(), T, None),
    });
    cases.push(Case {
        name: "itt_layer",
        tolerance: LAYER_TOLERANCE,
        shapes: itt_shapes(),
        f: |_, v| itt(v, &RoutingPolicy::with_uniform_capacity(T - 1, 0.5)),
    });
    cases.push(Case {
        name: "itt_layer_symmetric_tanh",
        tolerance: LAYER_TOLERANCE,
        shapes: itt_shapes(),
        f: |_, v| {
            let policy = RoutingPolicy {
                normalization: Normalization::Tanh,
                reweighting: Reweighting::Symmetric,
                ..RoutingPolicy::with_uniform_capacity(T - 1, 0.5)
            };
            itt(v, &policy)
        },
    });
    cases
}

fn point(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| Tensor::randn(s, 0.5, &mut rng))
        .collect()
}

/// Names of every case in [`run_suite`], in order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case at every seed. `filter`, when given, keeps cases whose
/// name contains it.
pub fn run_suite(seeds: &[u64], filter: Option<&str>) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for case in cases() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        for &seed in seeds {
            let report = grad_check(case.f, &point(&case.shapes, seed), EPS)?;
            let error = report.worst();
            out.push(GradCase {
                name: case.name.to_string(),
                seed,
                error,
                tolerance: case.tolerance,
                pass: error < case.tolerance,
            });
        }
    }
    Ok(out)
}
