//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive executes eagerly and appends a node to the [`Tape`]
//! holding its output value and whatever its adjoint needs. [`Tape::backward`]
//! replays the adjoints in reverse record order from a scalar root.
//!
//! ```
//! use dgg_core::autodiff::Tape;
//! use dgg_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;
mod ops;

use std::cell::Cell;

pub use gradcheck::{check_gradient, finite_difference_check, FdConfig, FdFailure, FdReport};
pub use ops::{argsort_descending, invert_permutation};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse operation identity, used for diagnostics and adjoint fault
/// injection in verification tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Relu,
    Neg,
    Scale,
    AddScalar,
    Sigmoid,
    Softplus,
    Abs,
    Clamp,
    Pow,
    SoftmaxRows,
    LogSoftmaxRows,
    Sum,
    Mean,
    SumRows,
    L1NormRows,
    Concat,
    PermuteRows,
    Transpose,
    Reshape,
    PairAdd,
    AdjointMean,
    ScaleRows,
    ScaleCols,
    AddBias,
    Select,
    HeavisideGate,
    StraightThrough,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Relu,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Softplus,
    Abs,
    Clamp(f64, f64),
    Pow(f64),
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    L1NormRows(Var),
    Concat { a: Var, b: Var, axis: usize },
    PermuteRows { x: Var, perms: Vec<Vec<usize>> },
    Transpose(Var),
    Reshape(Var),
    PairAdd(Var, Var),
    AdjointMean { x: Var, n: usize },
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    AddBias(Var, Var),
    Select { x: Var, indices: Vec<usize> },
    Gate { k: Var, lambda: f64 },
    StraightThrough(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Binary(k, ..) => match k {
                BinaryKind::Add => OpKind::Add,
                BinaryKind::Sub => OpKind::Sub,
                BinaryKind::Mul => OpKind::Mul,
                BinaryKind::Div => OpKind::Div,
            },
            Op::Unary(k, _) => match k {
                UnaryKind::Exp => OpKind::Exp,
                UnaryKind::Log => OpKind::Log,
                UnaryKind::Tanh => OpKind::Tanh,
                UnaryKind::Relu => OpKind::Relu,
                UnaryKind::Neg => OpKind::Neg,
                UnaryKind::Scale(_) => OpKind::Scale,
                UnaryKind::AddScalar(_) => OpKind::AddScalar,
                UnaryKind::Sigmoid => OpKind::Sigmoid,
                UnaryKind::Softplus => OpKind::Softplus,
                UnaryKind::Abs => OpKind::Abs,
                UnaryKind::Clamp(..) => OpKind::Clamp,
                UnaryKind::Pow(_) => OpKind::Pow,
            },
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumRows(_) => OpKind::SumRows,
            Op::L1NormRows(_) => OpKind::L1NormRows,
            Op::Concat { .. } => OpKind::Concat,
            Op::PermuteRows { .. } => OpKind::PermuteRows,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::PairAdd(..) => OpKind::PairAdd,
            Op::AdjointMean { .. } => OpKind::AdjointMean,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::ScaleCols(..) => OpKind::ScaleCols,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Select { .. } => OpKind::Select,
            Op::Gate { .. } => OpKind::HeavisideGate,
            Op::StraightThrough(_) => OpKind::StraightThrough,
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

thread_local! {
    static ADJOINT_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Runs `f` with the adjoint of every `kind` node scaled by 1.5.
///
/// Negative control for gradient verification: a check run inside this
/// scope must report a failure for any path through `kind`.
pub fn with_adjoint_fault<R>(kind: OpKind, f: impl FnOnce() -> R) -> R {
    let prev = ADJOINT_FAULT.with(|c| c.replace(Some(kind)));
    let out = f();
    ADJOINT_FAULT.with(|c| c.set(prev));
    out
}

/// Record of executed primitives.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar root with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` if the leaf does not require grad or is
    /// not an ancestor of the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can serve the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Backpropagates from a single-element `root`.
    ///
    /// May run once per recording; call [`Tape::reset`] before reusing the
    /// tape so gradients never carry over between steps.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::arg("backward already ran on this tape; reset it first"));
        }
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::arg(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::arg("backward root does not depend on any differentiable input"));
        }
        self.backward_done = true;

        let fault = ADJOINT_FAULT.with(Cell::get);
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.adjoint(idx, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                    .map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn adjoint(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Returns the accumulation buffer for `v`, or None when `v` takes no gradient.
        fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::gemm_nt(g, bv.data(), ga, m, k, n);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::gemm_tn(av.data(), g, gb, m, k, n);
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let la = av.len();
                let lb = bv.len();
                let n = g.len();
                let ai = |i: usize| if la == 1 { av[0] } else { av[i] };
                let bi = |i: usize| if lb == 1 { bv[0] } else { bv[i] };
                let da = |i: usize| match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[i],
                    BinaryKind::Mul => g[i] * bi(i),
                    BinaryKind::Div => g[i] / bi(i),
                };
                let db = |i: usize| match kind {
                    BinaryKind::Add => g[i],
                    BinaryKind::Sub => -g[i],
                    BinaryKind::Mul => g[i] * ai(i),
                    BinaryKind::Div => -g[i] * ai(i) / (bi(i) * bi(i)),
                };
                if let Some(ga) = slot(nodes, grads, *a) {
                    if la == 1 {
                        ga[0] += (0..n).map(da).sum::<f64>();
                    } else {
                        ga.iter_mut().enumerate().for_each(|(i, s)| *s += da(i));
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if lb == 1 {
                        gb[0] += (0..n).map(db).sum::<f64>();
                    } else {
                        gb.iter_mut().enumerate().for_each(|(i, s)| *s += db(i));
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xv = val(*x).data();
                let y = out.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..gx.len() {
                        let d = match *kind {
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / xv[i],
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Scale(c) => c,
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Softplus => kernels::sigmoid(xv[i]),
                            UnaryKind::Abs => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else if xv[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Clamp(lo, hi) => {
                                if xv[i] >= lo && xv[i] <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Pow(p) => p * xv[i].powf(p - 1.0),
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = (out.rows(), out.cols());
                let y = out.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let (r, c) = (out.rows(), out.cols());
                let y = out.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let gsum: f64 = g[row.clone()].iter().sum();
                        for j in row {
                            gx[j] += g[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let scale = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|s| *s += scale);
                }
            }
            Op::SumRows(x) | Op::L1NormRows(x) => {
                let xv = val(*x);
                let c = xv.cols();
                let l1 = matches!(node.op, Op::L1NormRows(_));
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (j, s) in gx.iter_mut().enumerate() {
                        let gi = g[j / c];
                        *s += if l1 {
                            let v = xv.data()[j];
                            if v > 0.0 {
                                gi
                            } else if v < 0.0 {
                                -gi
                            } else {
                                0.0
                            }
                        } else {
                            gi
                        };
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let sa = val(*a).shape();
                let sb = val(*b).shape();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (la, lb) = (sa[*axis] * inner, sb[*axis] * inner);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for o in 0..outer {
                        for t in 0..la {
                            ga[o * la + t] += g[o * (la + lb) + t];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for o in 0..outer {
                        for t in 0..lb {
                            gb[o * lb + t] += g[o * (la + lb) + la + t];
                        }
                    }
                }
            }
            Op::PermuteRows { x, perms } => {
                let c = out.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, perm) in perms.iter().enumerate() {
                        for (col, &src) in perm.iter().enumerate() {
                            gx[r * c + src] += g[r * c + col];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            Op::PairAdd(p, q) => {
                let (n, m) = (val(*p).shape()[0], val(*q).shape()[0]);
                let d = out.cols();
                if let Some(gp) = slot(nodes, grads, *p) {
                    for i in 0..n {
                        for j in 0..m {
                            let base = (i * m + j) * d;
                            for c in 0..d {
                                gp[i * d + c] += g[base + c];
                            }
                        }
                    }
                }
                if let Some(gq) = slot(nodes, grads, *q) {
                    for i in 0..n {
                        for j in 0..m {
                            let base = (i * m + j) * d;
                            for c in 0..d {
                                gq[j * d + c] += g[base + c];
                            }
                        }
                    }
                }
            }
            Op::AdjointMean { x, n } => {
                let d = out.cols();
                let n = *n;
                if let Some(gx) = slot(nodes, grads, *x) {
                    // The neighbor relation is symmetric, so the adjoint of
                    // "mean over neighbors" is "sum over neighbors of g / degree".
                    let mut scaled = g.to_vec();
                    for i in 0..n {
                        for j in 0..n {
                            let deg = kernels::adjoint_degree(n, i, j);
                            let s = if deg == 0 { 0.0 } else { 1.0 / deg as f64 };
                            scaled[(i * n + j) * d..(i * n + j + 1) * d].iter_mut().for_each(|v| *v *= s);
                        }
                    }
                    let back = kernels::adjoint_neighbor_sum(&scaled, n, d);
                    gx.iter_mut().zip(&back).for_each(|(s, v)| *s += v);
                }
            }
            Op::ScaleRows(x, s) | Op::ScaleCols(x, s) => {
                let rows = matches!(node.op, Op::ScaleRows(..));
                let (xv, sv) = (val(*x).data(), val(*s).data());
                let c = out.cols();
                let pick = |j: usize| if rows { j / c } else { j % c };
                if let Some(gx) = slot(nodes, grads, *x) {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * sv[pick(j)];
                    }
                }
                if let Some(gs) = slot(nodes, grads, *s) {
                    for j in 0..g.len() {
                        gs[pick(j)] += g[j] * xv[j];
                    }
                }
            }
            Op::AddBias(x, b) => {
                let c = out.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (j, v) in g.iter().enumerate() {
                        gb[j % c] += v;
                    }
                }
            }
            Op::Select { x, indices } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (t, &src) in indices.iter().enumerate() {
                        gx[src] += g[t];
                    }
                }
            }
            Op::Gate { k, lambda } => {
                let kv = val(*k).data();
                let width = out.cols();
                if let Some(gk) = slot(nodes, grads, *k) {
                    for (i, s) in gk.iter_mut().enumerate() {
                        for d in 0..width {
                            *s += g[i * width + d] * kernels::gate_dk((d + 1) as f64, kv[i], *lambda);
                        }
                    }
                }
            }
        }
    }
}
