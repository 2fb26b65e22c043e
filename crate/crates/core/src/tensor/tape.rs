// Wengert-list reverse mode: every op appends a node holding its output value
// and, when any input requires a gradient, what backward needs. Backward walks
// the nodes in exact reverse recording order.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

const RMS_EPS: f64 = 1e-5;

/// Precomputed rotary angles: `cos`/`sin` are `[max_positions, half]` row-major.
#[derive(Debug, Clone)]
pub struct RotaryTable<F> {
    pub cos: Vec<F>,
    pub sin: Vec<F>,
    pub half: usize,
    pub max_positions: usize,
}

impl<F: Scalar> RotaryTable<F> {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Self {
        assert!(head_dim.is_multiple_of(2), "rotary head_dim must be even");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for i in 0..half {
                let inv_freq = base.powf(-((2 * i) as f64) / head_dim as f64);
                let angle = p as f64 * inv_freq;
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        RotaryTable {
            cos,
            sin,
            half,
            max_positions,
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, F),
    Pass(usize),
    Sum(usize),
    Softmax(usize),
    RmsNorm { x: usize, g: usize, inv: Vec<F> },
    Silu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Embedding { table: usize, ids: Vec<usize> },
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterAddRows { src: usize, idx: Vec<usize> },
    ScatterRows { base: usize, src: usize, idx: Vec<usize> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    Rotary {
        a: usize,
        table: Arc<RotaryTable<F>>,
        positions: Vec<usize>,
        n_heads: usize,
    },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<F> },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Pass(a) | Sum(a) | Softmax(a) | Silu(a) | Sigmoid(a)
            | Tanh(a) => vec![*a],
            RmsNorm { x, g, .. } => vec![*x, *g],
            Embedding { table, .. } => vec![*table],
            GatherRows { a, .. } | SliceCols { a, .. } | Rotary { a, .. } => vec![*a],
            ScatterAddRows { src, .. } => vec![*src],
            ScatterRows { base, src, .. } => vec![*base, *src],
            ConcatCols(parts) | ConcatRows(parts) => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<F> {
    name: &'static str,
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

struct Inner<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    backward_done: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<F> {
    inner: RefCell<Inner<F>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push("leaf", value, requires_grad, Op::Leaf)
    }

    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    fn push(&self, name: &'static str, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var<'_, F> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            name,
            value,
            requires_grad,
            op,
        });
        Var { tape: self, id }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<F>> {
        Ref::map(self.inner.borrow(), |inner| &inner.nodes[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn record(&self, name: &'static str, value: Tensor<F>, op: Op<F>) -> Result<Var<'_, F>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.requires(&op.inputs());
        Ok(self.push(name, value, requires_grad, op))
    }

    pub fn grad(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.inner.borrow().grads.get(var.id).cloned().flatten()
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.backward_done = false;
    }

    /// Populates gradients of `loss` with respect to every `requires_grad` node.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if inner.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_value = &inner.nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let Inner { nodes, grads, .. } = &mut *inner;
        *grads = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(nodes, grads, id, &g)?;
            grads[id] = Some(g);
        }
        inner.backward_done = true;
        Ok(())
    }
}

fn accumulate<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Tensor<F>>],
    id: usize,
    delta: Tensor<F>,
) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    if !delta.is_finite() {
        return Err(Error::NonFinite {
            op: nodes[id].name,
        });
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shapes")
}

fn matmul_raw<F: Scalar>(
    a: &[F],
    a_dims: (usize, usize),
    a_t: bool,
    b: &[F],
    b_dims: (usize, usize),
    b_t: bool,
) -> Vec<F> {
    // logical shapes after optional transpose
    let (m, k) = if a_t { (a_dims.1, a_dims.0) } else { a_dims };
    let n = if b_t { b_dims.0 } else { b_dims.1 };
    let a_strides = if a_t { (1, a_dims.1 as isize) } else { (a_dims.1 as isize, 1) };
    let b_strides = if b_t { (1, b_dims.1 as isize) } else { (b_dims.1 as isize, 1) };
    let mut c = vec![F::zero(); m * n];
    F::gemm(m, k, n, a, a_strides, b, b_strides, F::zero(), &mut c);
    c
}

fn gather_rows<F: Scalar>(t: &Tensor<F>, idx: &[usize]) -> Vec<F> {
    let (_, cols) = t.dims2();
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    out
}

fn rotate<F: Scalar>(
    data: &mut [F],
    cols: usize,
    table: &RotaryTable<F>,
    positions: &[usize],
    n_heads: usize,
    inverse: bool,
) {
    let head_dim = cols / n_heads;
    let half = table.half;
    for (r, &p) in positions.iter().enumerate() {
        let cos = &table.cos[p * half..(p + 1) * half];
        let sin = &table.sin[p * half..(p + 1) * half];
        let row = &mut data[r * cols..(r + 1) * cols];
        for h in 0..n_heads {
            let base = h * head_dim;
            for i in 0..half {
                let x1 = row[base + i];
                let x2 = row[base + i + half];
                let s = if inverse { -sin[i] } else { sin[i] };
                row[base + i] = x1 * cos[i] - x2 * s;
                row[base + i + half] = x1 * s + x2 * cos[i];
            }
        }
    }
}

fn backprop<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Tensor<F>>],
    id: usize,
    g: &Tensor<F>,
) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (ad, bd, gd) = (av.dims2(), bv.dims2(), g.dims2());
            if nodes[*a].requires_grad {
                let da = matmul_raw(g.data(), gd, false, bv.data(), bd, true);
                accumulate(nodes, grads, *a, Tensor::new(av.shape(), da)?)?;
            }
            if nodes[*b].requires_grad {
                let db = matmul_raw(av.data(), ad, true, g.data(), gd, false);
                accumulate(nodes, grads, *b, Tensor::new(bv.shape(), db)?)?;
            }
        }
        Op::Transpose(a) => {
            let (r, c) = g.dims2();
            let mut d = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g.data()[i * c + j];
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(&[c, r], d)?)?;
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.map(|v| -v))?;
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, zip_map(g, val(*b), |x, y| x * y))?;
            accumulate(nodes, grads, *b, zip_map(g, val(*a), |x, y| x * y))?;
        }
        Op::AddRow(a, v) => {
            accumulate(nodes, grads, *a, g.clone())?;
            if nodes[*v].requires_grad {
                let (rows, cols) = g.dims2();
                let mut dv = vec![F::zero(); cols];
                for i in 0..rows {
                    for (d, &x) in dv.iter_mut().zip(g.row(i)) {
                        *d = *d + x;
                    }
                }
                accumulate(nodes, grads, *v, Tensor::new(val(*v).shape(), dv)?)?;
            }
        }
        Op::MulRow(a, v) => {
            let (av, vv) = (val(*a), val(*v));
            let (rows, cols) = g.dims2();
            if nodes[*a].requires_grad {
                let mut da = g.clone();
                for i in 0..rows {
                    for j in 0..cols {
                        da.data_mut()[i * cols + j] = g.data()[i * cols + j] * vv.data()[j];
                    }
                }
                accumulate(nodes, grads, *a, da)?;
            }
            if nodes[*v].requires_grad {
                let mut dv = vec![F::zero(); cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dv[j] = dv[j] + g.data()[i * cols + j] * av.data()[i * cols + j];
                    }
                }
                accumulate(nodes, grads, *v, Tensor::new(vv.shape(), dv)?)?;
            }
        }
        Op::MulCol(a, v) => {
            let (av, vv) = (val(*a), val(*v));
            let (rows, cols) = g.dims2();
            if nodes[*a].requires_grad {
                let mut da = g.clone();
                for i in 0..rows {
                    for j in 0..cols {
                        da.data_mut()[i * cols + j] = g.data()[i * cols + j] * vv.data()[i];
                    }
                }
                accumulate(nodes, grads, *a, da)?;
            }
            if nodes[*v].requires_grad {
                let dv = (0..rows)
                    .map(|i| {
                        g.row(i)
                            .iter()
                            .zip(av.row(i))
                            .fold(F::zero(), |s, (&x, &y)| s + x * y)
                    })
                    .collect();
                accumulate(nodes, grads, *v, Tensor::new(vv.shape(), dv)?)?;
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.map(|v| v * *s))?,
        Op::Pass(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, g.clone().reshape(&shape)?)?
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), g.item()))?,
        Op::Softmax(a) => {
            let (rows, cols) = out.last_axis_dims();
            let mut d = vec![F::zero(); rows * cols];
            for i in 0..rows {
                let y = &out.data()[i * cols..(i + 1) * cols];
                let gy = &g.data()[i * cols..(i + 1) * cols];
                let dot = y.iter().zip(gy).fold(F::zero(), |s, (&p, &q)| s + p * q);
                for j in 0..cols {
                    d[i * cols + j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(out.shape(), d)?)?;
        }
        Op::RmsNorm { x, g: scale, inv } => {
            let (xv, sv) = (val(*x), val(*scale));
            let (rows, cols) = xv.dims2();
            let n = F::of(cols as f64);
            if nodes[*x].requires_grad {
                let mut dx = vec![F::zero(); rows * cols];
                for i in 0..rows {
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    let dot = (0..cols).fold(F::zero(), |s, j| s + gr[j] * sv.data()[j] * xr[j]);
                    let r = inv[i];
                    for j in 0..cols {
                        let h = gr[j] * sv.data()[j];
                        dx[i * cols + j] = r * h - r * r * r * xr[j] * dot / n;
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(xv.shape(), dx)?)?;
            }
            if nodes[*scale].requires_grad {
                let mut dg = vec![F::zero(); cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dg[j] = dg[j] + g.data()[i * cols + j] * xv.data()[i * cols + j] * inv[i];
                    }
                }
                accumulate(nodes, grads, *scale, Tensor::new(sv.shape(), dg)?)?;
            }
        }
        Op::Silu(a) => {
            let d = zip_map(g, val(*a), |gv, x| {
                let s = F::one() / (F::one() + (-x).exp());
                gv * s * (F::one() + x * (F::one() - s))
            });
            accumulate(nodes, grads, *a, d)?;
        }
        Op::Sigmoid(a) => {
            accumulate(nodes, grads, *a, zip_map(g, out, |gv, y| gv * y * (F::one() - y)))?
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, zip_map(g, out, |gv, y| gv * (F::one() - y * y)))?,
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let (_, cols) = tv.dims2();
            let mut d = Tensor::zeros(tv.shape());
            for (r, &tok) in ids.iter().enumerate() {
                for j in 0..cols {
                    d.data_mut()[tok * cols + j] = d.data()[tok * cols + j] + g.data()[r * cols + j];
                }
            }
            accumulate(nodes, grads, *table, d)?;
        }
        Op::GatherRows { a, idx } => {
            let av = val(*a);
            let (_, cols) = av.dims2();
            let mut d = Tensor::zeros(av.shape());
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    d.data_mut()[i * cols + j] = d.data()[i * cols + j] + g.data()[r * cols + j];
                }
            }
            accumulate(nodes, grads, *a, d)?;
        }
        Op::ScatterAddRows { src, idx } => {
            let sv = val(*src);
            accumulate(nodes, grads, *src, Tensor::new(sv.shape(), gather_rows(g, idx))?)?;
        }
        Op::ScatterRows { base, src, idx } => {
            if nodes[*base].requires_grad {
                let (_, cols) = g.dims2();
                let mut d = g.clone();
                for &i in idx {
                    d.data_mut()[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .for_each(|v| *v = F::zero());
                }
                accumulate(nodes, grads, *base, d)?;
            }
            if nodes[*src].requires_grad {
                let sv = val(*src);
                accumulate(nodes, grads, *src, Tensor::new(sv.shape(), gather_rows(g, idx))?)?;
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, cols) = g.dims2();
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let (_, pc) = pv.dims2();
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(rows * pc);
                    for i in 0..rows {
                        d.extend_from_slice(&g.data()[i * cols + offset..i * cols + offset + pc]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(pv.shape(), d)?)?;
                }
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let len = pv.numel();
                if nodes[p].requires_grad {
                    let d = g.data()[offset..offset + len].to_vec();
                    accumulate(nodes, grads, p, Tensor::new(pv.shape(), d)?)?;
                }
                offset += len;
            }
        }
        Op::SliceCols { a, start } => {
            let av = val(*a);
            let (rows, cols) = av.dims2();
            let (_, width) = g.dims2();
            let mut d = Tensor::zeros(av.shape());
            for i in 0..rows {
                d.data_mut()[i * cols + start..i * cols + start + width].copy_from_slice(g.row(i));
            }
            accumulate(nodes, grads, *a, d)?;
        }
        Op::Rotary {
            a,
            table,
            positions,
            n_heads,
        } => {
            let mut d = g.clone();
            let (_, cols) = d.dims2();
            rotate(d.data_mut(), cols, table, positions, *n_heads, true);
            accumulate(nodes, grads, *a, d)?;
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let lv = val(*logits);
            let (rows, cols) = lv.dims2();
            let scale = g.item() / F::of(rows as f64);
            let mut d = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                d[i * cols + t] = d[i * cols + t] - F::one();
            }
            d.iter_mut().for_each(|v| *v = *v * scale);
            accumulate(nodes, grads, *logits, Tensor::new(lv.shape(), d)?)?;
        }
    }
    Ok(())
}

fn expect_rank2<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// Clone of the recorded value.
    pub fn value(&self) -> Tensor<F> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<F>> {
        self.tape.grad(*self)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Var<'t, F> {
        self.tape.constant(self.value())
    }

    fn check_same_tape(&self, other: &Var<'t, F>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_same_tape(other);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            let (m, k) = expect_rank2("matmul", &a)?;
            let (k2, n) = expect_rank2("matmul", &b)?;
            if k != k2 {
                return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            Tensor::new(&[m, n], matmul_raw(a.data(), (m, k), false, b.data(), (k2, n), false))?
        };
        self.tape.record("matmul", out, Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Result<Var<'t, F>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (r, c) = expect_rank2("transpose", &a)?;
            let mut d = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(&[c, r], d)?
        };
        self.tape.record("transpose", out, Op::Transpose(self.id))
    }

    fn binary(
        &self,
        other: &Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var<'t, F>> {
        self.check_same_tape(other);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            same_shape(name, &a, &b)?;
            zip_map(&a, &b, f)
        };
        self.tape.record(name, out, op)
    }

    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    fn row_broadcast(
        &self,
        v: &Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var<'t, F>> {
        self.check_same_tape(v);
        let out = {
            let a = self.tape.value_ref(self.id);
            let vv = self.tape.value_ref(v.id);
            let (rows, cols) = expect_rank2(name, &a)?;
            if vv.numel() != cols || vv.shape().len() != 1 {
                return Err(shape_err(name, format!("{:?} with row vector {:?}", a.shape(), vv.shape())));
            }
            let mut d = a.data().to_vec();
            for i in 0..rows {
                for j in 0..cols {
                    d[i * cols + j] = f(d[i * cols + j], vv.data()[j]);
                }
            }
            Tensor::new(a.shape(), d)?
        };
        self.tape.record(name, out, op)
    }

    /// `[n,d] + [d]`, the vector added to every row.
    pub fn add_row(&self, v: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.row_broadcast(v, "add_row", |x, y| x + y, Op::AddRow(self.id, v.id))
    }

    /// `[n,d] ⊙ [d]`, every row scaled elementwise by the vector.
    pub fn mul_row(&self, v: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.row_broadcast(v, "mul_row", |x, y| x * y, Op::MulRow(self.id, v.id))
    }

    /// `[n,d] ⊙ [n]`, row `i` scaled by `v[i]`.
    pub fn mul_col(&self, v: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_same_tape(v);
        let out = {
            let a = self.tape.value_ref(self.id);
            let vv = self.tape.value_ref(v.id);
            let (rows, cols) = expect_rank2("mul_col", &a)?;
            if vv.numel() != rows || vv.shape().len() != 1 {
                return Err(shape_err("mul_col", format!("{:?} with column vector {:?}", a.shape(), vv.shape())));
            }
            let mut d = a.data().to_vec();
            for i in 0..rows {
                for j in 0..cols {
                    d[i * cols + j] = d[i * cols + j] * vv.data()[i];
                }
            }
            Tensor::new(a.shape(), d)?
        };
        self.tape.record("mul_col", out, Op::MulCol(self.id, v.id))
    }

    pub fn scale(&self, s: F) -> Result<Var<'t, F>> {
        let out = self.tape.value_ref(self.id).map(|v| v * s);
        self.tape.record("scale", out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: F) -> Result<Var<'t, F>> {
        let out = self.tape.value_ref(self.id).map(|v| v + s);
        self.tape.record("add_scalar", out, Op::Pass(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = self.tape.value_ref(self.id).clone().reshape(shape)?;
        self.tape.record("reshape", out, Op::Pass(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t, F>> {
        let s = self.tape.value_ref(self.id).data().iter().fold(F::zero(), |s, &v| s + v);
        self.tape.record("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t, F>> {
        let n = self.tape.value_ref(self.id).numel();
        self.sum()?.scale(F::one() / F::of(n as f64))
    }

    fn softmax_impl(&self, name: &'static str, causal: bool) -> Result<Var<'t, F>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (rows, cols) = a.last_axis_dims();
            if a.shape().is_empty() || cols == 0 {
                return Err(shape_err(name, format!("{:?}", a.shape())));
            }
            if causal && rows > cols {
                return Err(shape_err(name, format!("more queries than keys: {:?}", a.shape())));
            }
            let offset = cols - rows.min(cols);
            let mut d = vec![F::zero(); rows * cols];
            for i in 0..rows {
                let row = &a.data()[i * cols..(i + 1) * cols];
                let visible = if causal { i + offset + 1 } else { cols };
                let max = row[..visible].iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                let mut z = F::zero();
                for j in 0..visible {
                    let e = (row[j] - max).exp();
                    d[i * cols + j] = e;
                    z = z + e;
                }
                for v in &mut d[i * cols..i * cols + visible] {
                    *v = *v / z;
                }
            }
            Tensor::new(a.shape(), d)?
        };
        self.tape.record(name, out, Op::Softmax(self.id))
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&self) -> Result<Var<'t, F>> {
        self.softmax_impl("softmax", false)
    }

    /// Softmax where row `i` of an `[r, c]` score matrix sees columns `0..=i + c - r`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&self) -> Result<Var<'t, F>> {
        self.softmax_impl("causal_softmax", true)
    }

    /// Root-mean-square normalization over the last axis, eps 1e-5, times `scale`.
    pub fn rms_norm(&self, scale: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_same_tape(scale);
        let (out, inv) = {
            let x = self.tape.value_ref(self.id);
            let g = self.tape.value_ref(scale.id);
            let (rows, cols) = expect_rank2("rms_norm", &x)?;
            if g.numel() != cols {
                return Err(shape_err("rms_norm", format!("{:?} with scale {:?}", x.shape(), g.shape())));
            }
            let eps = F::of(RMS_EPS);
            let mut inv = Vec::with_capacity(rows);
            let mut d = vec![F::zero(); rows * cols];
            for i in 0..rows {
                let row = x.row(i);
                let ms = row.iter().fold(F::zero(), |s, &v| s + v * v) / F::of(cols as f64);
                let r = F::one() / (ms + eps).sqrt();
                inv.push(r);
                for j in 0..cols {
                    d[i * cols + j] = row[j] * r * g.data()[j];
                }
            }
            (Tensor::new(x.shape(), d)?, inv)
        };
        self.tape.record(
            "rms_norm",
            out,
            Op::RmsNorm {
                x: self.id,
                g: scale.id,
                inv,
            },
        )
    }

    pub fn silu(&self) -> Result<Var<'t, F>> {
        let out = self
            .tape
            .value_ref(self.id)
            .map(|x| x / (F::one() + (-x).exp()));
        self.tape.record("silu", out, Op::Silu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, F>> {
        let out = self
            .tape
            .value_ref(self.id)
            .map(|x| F::one() / (F::one() + (-x).exp()));
        self.tape.record("sigmoid", out, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t, F>> {
        let out = self.tape.value_ref(self.id).map(|x| x.tanh());
        self.tape.record("tanh", out, Op::Tanh(self.id))
    }

    /// Rows `ids` of an embedding table `[vocab, d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, F>> {
        let out = {
            let table = self.tape.value_ref(self.id);
            let (vocab, cols) = expect_rank2("embedding", &table)?;
            if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
                return Err(Error::TokenOutOfRange { token: bad, vocab });
            }
            Tensor::new(&[ids.len(), cols], gather_rows(&table, ids))?
        };
        self.tape.record(
            "embedding",
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Selects rows (rank 2) or elements (rank 1); the adjoint is index-add.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, F>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (rows, _) = a.dims2();
            if a.shape().is_empty() || idx.iter().any(|&i| i >= rows) {
                return Err(shape_err("gather_rows", format!("index out of range for {:?}", a.shape())));
            }
            let mut shape = a.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(&shape, gather_rows(&a, idx))?
        };
        self.tape.record(
            "gather_rows",
            out,
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Index-add: a zero tensor with `rows` rows where `self[r]` is added to row `idx[r]`.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Var<'t, F>> {
        let out = {
            let src = self.tape.value_ref(self.id);
            let (src_rows, cols) = src.dims2();
            if src.shape().is_empty() || src_rows != idx.len() || idx.iter().any(|&i| i >= rows) {
                return Err(shape_err("scatter_add_rows", format!("{:?} into {rows} rows", src.shape())));
            }
            let mut shape = src.shape().to_vec();
            shape[0] = rows;
            let mut d = vec![F::zero(); rows * cols];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    d[i * cols + j] = d[i * cols + j] + src.data()[r * cols + j];
                }
            }
            Tensor::new(&shape, d)?
        };
        self.tape.record(
            "scatter_add_rows",
            out,
            Op::ScatterAddRows {
                src: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Copy of `self` whose rows `idx` (distinct) are replaced by the rows of `src`.
    /// Untouched rows are bit-identical to the input.
    pub fn scatter_rows(&self, idx: &[usize], src: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_same_tape(src);
        let out = {
            let base = self.tape.value_ref(self.id);
            let s = self.tape.value_ref(src.id);
            let (rows, cols) = base.dims2();
            let (src_rows, src_cols) = s.dims2();
            if base.shape().is_empty() || src_rows != idx.len() || src_cols != cols {
                return Err(shape_err("scatter_rows", format!("{:?} into {:?}", s.shape(), base.shape())));
            }
            let mut seen = vec![false; rows];
            let mut d = base.data().to_vec();
            for (r, &i) in idx.iter().enumerate() {
                if i >= rows || std::mem::replace(&mut seen[i], true) {
                    return Err(shape_err("scatter_rows", format!("index {i} invalid or repeated")));
                }
                d[i * cols..(i + 1) * cols].copy_from_slice(s.row(r));
            }
            Tensor::new(base.shape(), d)?
        };
        self.tape.record(
            "scatter_rows",
            out,
            Op::ScatterRows {
                base: self.id,
                src: src.id,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t, F>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (rows, cols) = expect_rank2("slice_cols", &a)?;
            if start > end || end > cols {
                return Err(shape_err("slice_cols", format!("{start}..{end} of {cols} columns")));
            }
            let mut d = Vec::with_capacity(rows * (end - start));
            for i in 0..rows {
                d.extend_from_slice(&a.row(i)[start..end]);
            }
            Tensor::new(&[rows, end - start], d)?
        };
        self.tape
            .record("slice_cols", out, Op::SliceCols { a: self.id, start })
    }

    /// Applies rotary position embedding to every head of an `[n, d]` activation.
    pub fn rotary(
        &self,
        table: &Arc<RotaryTable<F>>,
        positions: &[usize],
        n_heads: usize,
    ) -> Result<Var<'t, F>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (rows, cols) = expect_rank2("rotary", &a)?;
            if rows != positions.len() || cols != n_heads * table.half * 2 {
                return Err(shape_err(
                    "rotary",
                    format!("{:?} with {} positions, {n_heads} heads", a.shape(), positions.len()),
                ));
            }
            if let Some(&p) = positions.iter().find(|&&p| p >= table.max_positions) {
                return Err(Error::SequenceTooLong {
                    position: p,
                    max: table.max_positions,
                });
            }
            let mut out = a.clone();
            rotate(out.data_mut(), cols, table, positions, n_heads, false);
            out
        };
        self.tape.record(
            "rotary",
            out,
            Op::Rotary {
                a: self.id,
                table: Arc::clone(table),
                positions: positions.to_vec(),
                n_heads,
            },
        )
    }

    /// Mean token cross-entropy of `[n, vocab]` logits against `targets`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, F>> {
        let (loss, probs) = {
            let logits = self.tape.value_ref(self.id);
            let (rows, cols) = expect_rank2("cross_entropy", &logits)?;
            if rows != targets.len() || rows == 0 {
                return Err(shape_err("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
                return Err(Error::TokenOutOfRange { token: bad, vocab: cols });
            }
            let mut probs = vec![F::zero(); rows * cols];
            let mut total = F::zero();
            for i in 0..rows {
                let row = logits.row(i);
                let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                let z = row.iter().fold(F::zero(), |s, &v| s + (v - max).exp());
                let log_z = z.ln() + max;
                total = total + log_z - row[targets[i]];
                for j in 0..cols {
                    probs[i * cols + j] = (row[j] - log_z).exp();
                }
            }
            (total / F::of(rows as f64), probs)
        };
        self.tape.record(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    fn concat(parts: &[Var<'t, F>], by_cols: bool) -> Result<Var<'t, F>> {
        let name = if by_cols { "concat_cols" } else { "concat_rows" };
        let first = parts
            .first()
            .ok_or_else(|| shape_err(name, "no inputs"))?;
        let tape = first.tape;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let mut dims = Vec::with_capacity(values.len());
            for v in &values {
                dims.push(expect_rank2(name, v)?);
            }
            if by_cols {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(shape_err(name, format!("row counts {dims:?}")));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut d = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for v in &values {
                        d.extend_from_slice(v.row(i));
                    }
                }
                Tensor::new(&[rows, cols], d)?
            } else {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(shape_err(name, format!("column counts {dims:?}")));
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut d = Vec::with_capacity(rows * cols);
                for v in &values {
                    d.extend_from_slice(v.data());
                }
                Tensor::new(&[rows, cols], d)?
            }
        };
        let ids = parts.iter().map(|p| p.id).collect();
        let op = if by_cols { Op::ConcatCols(ids) } else { Op::ConcatRows(ids) };
        tape.record(name, out, op)
    }

    pub fn concat_cols(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        Self::concat(parts, true)
    }

    pub fn concat_rows(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        Self::concat(parts, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn independent_loss_gives_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.param(t(&[2], &[4.0, 5.0]));
        let _unused = x.scale(2.0).unwrap();
        let loss = c.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(x.grad().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(c.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
        tape.reset();
        tape.backward(loss).unwrap();
        let empty = Tape::<f64>::new();
        let other = Tape::<f64>::new();
        let s = other.param(Tensor::scalar(1.0));
        // a var from another tape is out of range on an empty tape
        assert!(matches!(empty.backward(Var { tape: &empty, id: s.id }), Err(Error::EmptyTape)));
    }

    #[test]
    fn reused_tensor_accumulates() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -2.0]));
        let y = x.add(&x).unwrap().add(&x).unwrap();
        tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn identity_matmul_and_uniform_softmax() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        assert_eq!(eye.matmul(&a).unwrap().value(), a.value());
        let z = tape.constant(t(&[4], &[0.0; 4]));
        assert_eq!(z.softmax().unwrap().value().data(), &[0.25; 4]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        assert!(a.add(&tape.constant(Tensor::zeros(&[3, 2]))).is_err());
    }

    #[test]
    fn non_finite_is_reported() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64(&[1], &[1e30]).unwrap());
        let err = a.mul(&a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::new();
        let s = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let p = s.causal_softmax().unwrap().value();
        // two queries over three keys: row 0 sees keys 0..=1, row 1 sees all
        assert_eq!(p.data()[2], 0.0);
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.row(1).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn scatter_rows_passes_other_rows_bitwise() {
        let tape = Tape::new();
        let base = tape.constant(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let src = tape.constant(t(&[1, 2], &[9.0, 9.0]));
        let out = base.scatter_rows(&[1], &src).unwrap().value();
        assert_eq!(out.data(), &[0.1, 0.2, 9.0, 9.0, 0.5, 0.6]);
        assert!(base.scatter_rows(&[1, 1], &tape.constant(Tensor::zeros(&[2, 2]))).is_err());
    }
}
