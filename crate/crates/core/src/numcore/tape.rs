//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! Every op appends one node holding its forward value. Nodes are never
//! mutated after they are pushed, so the tape order is a topological order
//! and `backward` is a single reverse sweep over it.

use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// GELU tanh-approximation constants: sqrt(2/pi) and the cubic coefficient.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGrad(Var),
    /// `op(a)·op(b)`, where the flags select transposition.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize, end: usize },
    SliceCols { a: Var, start: usize, end: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    Transpose(Var),
    MeanSquare(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad(_) => "stop_gradient",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::MeanSquare(_) => "mean_square",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::StopGrad(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::MeanSquare(a)
            | Op::Sum(a) => vec![*a],
            Op::SliceRows { a, .. } | Op::SliceCols { a, .. } => vec![*a],
            Op::GatherRows { table, .. } => vec![*table],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive ops with their forward values.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Lookup(format!(
                "variable {}:{} is not on tape {}",
                v.tape, v.idx, self.id
            )));
        }
        Ok(())
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.index()]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        Ok(self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        }))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push_node(&mut self, node: Node) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(node);
        Var { tape: self.id, idx }
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for v in &inputs {
            self.check(*v)?;
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
            forward(&op, &vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        let requires_grad =
            !matches!(op, Op::StopGrad(_)) && inputs.iter().any(|v| self.requires_grad(*v));
        Ok(self.push_node(Node {
            value,
            op,
            requires_grad,
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: false,
        })
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: true,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows { a, start, end })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { a, start, end })
    }

    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows { table, idx })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    /// Passes the value forward; contributes exactly zero gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.push(Op::StopGrad(a))
    }

    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanSquare(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Recomputes every node from the leaf values in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let ins: Vec<&Tensor> = op.inputs().iter().map(|v| &values[v.index()]).collect();
                    forward(op, &ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode gradients of a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.backward_seeded(&[(loss, seed)])
    }

    /// Reverse sweep starting from arbitrary output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            self.check(*v)?;
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward seed", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads[v.index()], g);
            last = last.max(v.index() + 1);
        }
        let mut visited = Vec::new();
        for idx in (0..last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: &Var| self.nodes[v.index()].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                if wants(a) {
                    // dA = dC·op(B)ᵀ (transposed back when A was read transposed)
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        // dA (k×m) = op(B)·dCᵀ
                        gemm(k, n, m, bv.data(), *tb, g.data(), true, &mut da, false);
                    } else {
                        gemm(m, n, k, g.data(), false, bv.data(), !*tb, &mut da, false);
                    }
                    add_grad(grads, *a, av.shape(), da);
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        // dB (n×k) = dCᵀ·op(A)
                        gemm(n, m, k, g.data(), true, av.data(), *ta, &mut db, false);
                    } else {
                        gemm(k, m, n, av.data(), !*ta, g.data(), false, &mut db, false);
                    }
                    add_grad(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_grad(grads, *a, g.shape(), g.data().to_vec());
                }
                if wants(b) {
                    add_grad(grads, *b, g.shape(), g.data().to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    add_grad(grads, *a, g.shape(), g.data().to_vec());
                }
                if wants(b) {
                    add_grad(grads, *b, g.shape(), g.data().iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let d = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    add_grad(grads, *a, g.shape(), d);
                }
                if wants(b) {
                    let d = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    add_grad(grads, *b, g.shape(), d);
                }
            }
            Op::AddRow(a, row) => {
                if wants(a) {
                    add_grad(grads, *a, g.shape(), g.data().to_vec());
                }
                if wants(row) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for r in g.data().chunks_exact(c) {
                        for (acc, v) in d.iter_mut().zip(r) {
                            *acc += v;
                        }
                    }
                    add_grad(grads, *row, self.shape(*row), d);
                }
            }
            Op::Scale(a, s) => {
                if wants(a) {
                    add_grad(grads, *a, g.shape(), g.data().iter().map(|v| v * s).collect());
                }
            }
            Op::Gelu(a) => {
                if wants(a) {
                    let x = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    add_grad(grads, *a, g.shape(), d);
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(a) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d
                        .chunks_exact_mut(c)
                        .zip(y.data().chunks_exact(c))
                        .zip(g.data().chunks_exact(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((o, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = y * (g - dot);
                        }
                    }
                    add_grad(grads, *a, g.shape(), d);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for ((xr, gr), dxr) in xv
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let (mean, inv_std) = row_moments(xr, *eps);
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * inv_std;
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dxr[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if wants(x) {
                    add_grad(grads, *x, xv.shape(), dx);
                }
                if wants(gain) {
                    add_grad(grads, *gain, self.shape(*gain), dgain);
                }
                if wants(bias) {
                    add_grad(grads, *bias, self.shape(*bias), dbias);
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if wants(p) {
                        let d = g.data()[offset * c..(offset + rows) * c].to_vec();
                        add_grad(grads, *p, self.shape(*p), d);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        add_grad(grads, *p, self.shape(*p), d);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { a, start, .. } => {
                if wants(a) {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut d = vec![0.0; av.len()];
                    d[start * c..start * c + g.len()].copy_from_slice(g.data());
                    add_grad(grads, *a, av.shape(), d);
                }
            }
            Op::SliceCols { a, start, end } => {
                if wants(a) {
                    let av = self.value(*a);
                    let c = av.cols();
                    let w = end - start;
                    let mut d = vec![0.0; av.len()];
                    for r in 0..av.rows() {
                        d[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    add_grad(grads, *a, av.shape(), d);
                }
            }
            Op::GatherRows { table, idx } => {
                if wants(table) {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut d = vec![0.0; tv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g.data()[r * c + j];
                        }
                    }
                    add_grad(grads, *table, tv.shape(), d);
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let t = transpose(g);
                    add_grad(grads, *a, self.shape(*a), t.into_data());
                }
            }
            Op::MeanSquare(a) => {
                if wants(a) {
                    let av = self.value(*a);
                    let s = 2.0 * g.item() / av.len() as f64;
                    add_grad(grads, *a, av.shape(), av.data().iter().map(|v| s * v).collect());
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let av = self.value(*a);
                    add_grad(grads, *a, av.shape(), vec![g.item(); av.len()]);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    let slot = &mut grads[v.index()];
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; a node that received no gradient yields zeros.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Result<Tensor> {
        if v.tape != self.tape {
            return Err(Error::Lookup(format!(
                "variable from tape {} queried against gradients of tape {}",
                v.tape, self.tape
            )));
        }
        tape.check(v)?;
        Ok(self.grads[v.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    /// Node indices in the order the sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Mean and `1/sqrt(var + eps)` of one row, summed left to right.
fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[]));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Forward evaluation shared by `push` and `replay`.
fn forward(op: &Op, ins: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves carry their value"),
        Op::StopGrad(_) => Ok(ins[0].clone()),
        Op::MatMul { ta, tb, .. } => {
            let (a, b) = (ins[0], ins[1]);
            require_matrix("matmul", a)?;
            require_matrix("matmul", b)?;
            let (m, ka) = if *ta {
                (a.shape()[1], a.shape()[0])
            } else {
                (a.shape()[0], a.shape()[1])
            };
            let (kb, n) = if *tb {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if ka != kb {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, ka, n, a.data(), *ta, b.data(), *tb, &mut out, false);
            Tensor::new(vec![m, n], out)
        }
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) => {
            let (a, b) = (ins[0], ins[1]);
            same_shape(op.name(), a, b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), d)
        }
        Op::AddRow(..) => {
            let (a, row) = (ins[0], ins[1]);
            if row.len() != a.cols() {
                return Err(Error::shape("add_row", a.shape(), row.shape()));
            }
            let c = a.cols();
            let mut d = a.data().to_vec();
            for r in d.chunks_exact_mut(c) {
                for (x, b) in r.iter_mut().zip(row.data()) {
                    *x += b;
                }
            }
            Tensor::new(a.shape().to_vec(), d)
        }
        Op::Scale(_, s) => Ok(Tensor::new(
            ins[0].shape().to_vec(),
            ins[0].data().iter().map(|v| v * s).collect(),
        )?),
        Op::Gelu(_) => Tensor::new(
            ins[0].shape().to_vec(),
            ins[0].data().iter().map(|&v| gelu(v)).collect(),
        ),
        Op::SoftmaxRows(_) => {
            let a = ins[0];
            let c = a.cols();
            let mut d = a.data().to_vec();
            if c > 0 {
                for r in d.chunks_exact_mut(c) {
                    softmax_in_place(r);
                }
            }
            Tensor::new(a.shape().to_vec(), d)
        }
        Op::LayerNorm { eps, .. } => {
            let (x, gain, bias) = (ins[0], ins[1], ins[2]);
            let c = x.cols();
            if gain.len() != c || bias.len() != c {
                return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
            }
            let mut d = vec![0.0; x.len()];
            for (xr, yr) in x.data().chunks_exact(c).zip(d.chunks_exact_mut(c)) {
                let (mean, inv_std) = row_moments(xr, *eps);
                for j in 0..c {
                    yr[j] = (xr[j] - mean) * inv_std * gain.data()[j] + bias.data()[j];
                }
            }
            Tensor::new(x.shape().to_vec(), d)
        }
        Op::ConcatRows(_) => {
            for t in ins {
                require_matrix("concat_rows", t)?;
            }
            Tensor::concat_rows(ins)
        }
        Op::ConcatCols(_) => {
            let rows = ins[0].rows();
            for t in ins {
                require_matrix("concat_cols", t)?;
                if t.rows() != rows {
                    return Err(Error::shape("concat_cols", ins[0].shape(), t.shape()));
                }
            }
            let total: usize = ins.iter().map(|t| t.cols()).sum();
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in ins {
                    d.extend_from_slice(t.row(r));
                }
            }
            Tensor::new(vec![rows, total], d)
        }
        Op::SliceRows { start, end, .. } => {
            let a = ins[0];
            require_matrix("slice_rows", a)?;
            if start > end || *end > a.rows() {
                return Err(Error::shape("slice_rows", a.shape(), &[*start, *end]));
            }
            Ok(a.slice_rows(*start, *end))
        }
        Op::SliceCols { start, end, .. } => {
            let a = ins[0];
            require_matrix("slice_cols", a)?;
            if start > end || *end > a.cols() {
                return Err(Error::shape("slice_cols", a.shape(), &[*start, *end]));
            }
            let mut d = Vec::with_capacity(a.rows() * (end - start));
            for r in 0..a.rows() {
                d.extend_from_slice(&a.row(r)[*start..*end]);
            }
            Tensor::new(vec![a.rows(), end - start], d)
        }
        Op::GatherRows { idx, .. } => {
            let t = ins[0];
            require_matrix("gather_rows", t)?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
                return Err(Error::shape("gather_rows", t.shape(), &[bad]));
            }
            let mut d = Vec::with_capacity(idx.len() * t.cols());
            for &i in idx {
                d.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), t.cols()], d)
        }
        Op::Transpose(_) => {
            require_matrix("transpose", ins[0])?;
            Ok(transpose(ins[0]))
        }
        Op::MeanSquare(_) => {
            let a = ins[0];
            if a.is_empty() {
                return Err(Error::Contract("mean of empty tensor".into()));
            }
            let s: f64 = a.data().iter().map(|v| v * v).sum();
            Ok(Tensor::scalar(s / a.len() as f64))
        }
        Op::Sum(_) => Ok(Tensor::scalar(ins[0].data().iter().sum())),
    }
}

/// Shift-stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
