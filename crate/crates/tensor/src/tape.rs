//! Eager tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns an append-only arena of nodes. Every op computes its
//! value immediately and records what backward needs. Insertion order is a
//! topological order, so the backward sweep is a single reverse pass that
//! visits each node once. A stop-gradient node copies its value and takes
//! `requires_grad = false`, so nothing upstream of it ever receives
//! gradient through that edge.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::broadcast_strides;
use crate::{broadcast_shapes, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, mul: f64 },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    // a [m,k] times b [n,k] transposed
    MatmulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    SumAll { x: usize },
    MeanRows { x: usize, rows: usize, cols: usize },
    SoftmaxRows { x: usize, rows: usize, cols: usize },
    Exp { x: usize },
    Rsqrt { x: usize },
    Sigmoid { x: usize },
    Rope { x: usize, phases: Rc<Vec<f64>>, rows: usize, cols: usize },
    SliceRows { x: usize, start: usize, len: usize, cols: usize, src_rows: usize },
    SliceCols { x: usize, start: usize, len: usize, rows: usize, src_cols: usize },
    ConcatRows { xs: Vec<usize>, cols: usize },
    ConcatCols { xs: Vec<usize>, rows: usize },
    Reshape { x: usize },
    StopGrad,
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording context for one computation graph.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the backward output with respect to `var`, if any
    /// reached it.
    pub fn wrt(&self, var: &Var) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("grad shape"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            shape: shape.clone(),
            value,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// Lifts a tensor as a non-differentiable leaf.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Lifts a tensor as a differentiable leaf regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Lifts a tensor honoring its `requires_grad` flag.
    pub fn input(&self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Reverse sweep from a scalar output. Gradients accumulate additively
    /// over fan-out; nodes behind stop-gradient boundaries receive none.
    pub fn backward(&self, output: &Var) -> Result<Gradients> {
        if !self.same_tape(&output.tape) {
            return Err(TensorError::TapeMismatch { op: "backward" });
        }
        let inner = self.inner.borrow();
        let out_node = &inner.nodes[output.id];
        if out_node.value.len() != 1 {
            return Err(TensorError::NonScalarOutput {
                shape: out_node.shape.clone(),
            });
        }
        if !out_node.requires_grad {
            return Err(TensorError::NoGradPath);
        }

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_op(&inner.nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = inner.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn needs(nodes: &[Node], ids: &[usize]) -> bool {
    ids.iter().any(|&i| nodes[i].requires_grad)
}

fn accumulate(grads: &mut Vec<Option<Vec<f64>>>, nodes: &[Node], id: usize, contrib: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    for (s, c) in slot.iter_mut().zip(contrib) {
        *s += c;
    }
}

/// Sums `g` (shaped `out_shape`) down to `in_shape` over broadcast axes.
fn reduce_to_shape(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let numel_in: usize = in_shape.iter().product();
    let mut out = vec![0.0; numel_in];
    let strides = broadcast_strides(in_shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    for &gv in g {
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            off += i * strides[d];
        }
        out[off] += gv;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Elementwise binary forward under broadcasting.
fn broadcast_zip(
    a: &[f64],
    ashape: &[usize],
    b: &[f64],
    bshape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    if ashape == out_shape && bshape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(ashape, out_shape);
    let sb = broadcast_strides(bshape, out_shape);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..numel {
        let (mut oa, mut ob) = (0, 0);
        for (d, &i) in idx.iter().enumerate() {
            oa += i * sa[d];
            ob += i * sb[d];
        }
        out.push(f(a[oa], b[ob]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Gradient of one broadcast operand: per-output contribution reduced to
/// the operand's shape.
fn broadcast_grad(
    g: &[f64],
    out_shape: &[usize],
    self_shape: &[usize],
    other: &[f64],
    other_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let sother = broadcast_strides(other_shape, out_shape);
    let mut contrib = Vec::with_capacity(g.len());
    let mut idx = vec![0usize; out_shape.len()];
    for &gv in g {
        let mut oo = 0;
        for (d, &i) in idx.iter().enumerate() {
            oo += i * sother[d];
        }
        contrib.push(f(gv, other[oo]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    reduce_to_shape(&contrib, out_shape, self_shape)
}

fn backward_op(nodes: &[Node], id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            let ga = reduce_to_shape(g, &node.shape, &nodes[*a].shape);
            accumulate(grads, nodes, *a, &ga);
            let gb = reduce_to_shape(g, &node.shape, &nodes[*b].shape);
            accumulate(grads, nodes, *b, &gb);
        }
        Op::Sub { a, b } => {
            let ga = reduce_to_shape(g, &node.shape, &nodes[*a].shape);
            accumulate(grads, nodes, *a, &ga);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let gb = reduce_to_shape(&neg, &node.shape, &nodes[*b].shape);
            accumulate(grads, nodes, *b, &gb);
        }
        Op::Mul { a, b } => {
            if nodes[*a].requires_grad {
                let ga = broadcast_grad(
                    g,
                    &node.shape,
                    &nodes[*a].shape,
                    &nodes[*b].value,
                    &nodes[*b].shape,
                    |gv, ov| gv * ov,
                );
                accumulate(grads, nodes, *a, &ga);
            }
            if nodes[*b].requires_grad {
                let gb = broadcast_grad(
                    g,
                    &node.shape,
                    &nodes[*b].shape,
                    &nodes[*a].value,
                    &nodes[*a].shape,
                    |gv, ov| gv * ov,
                );
                accumulate(grads, nodes, *b, &gb);
            }
        }
        Op::Affine { x, mul, .. } => {
            let gx: Vec<f64> = g.iter().map(|v| v * mul).collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Matmul { a, b, m, k, n } => {
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                mm_nt(g, &nodes[*b].value, *m, *n, *k, &mut ga);
                accumulate(grads, nodes, *a, &ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                mm_tn(&nodes[*a].value, g, *m, *k, *n, &mut gb);
                accumulate(grads, nodes, *b, &gb);
            }
        }
        Op::MatmulNt { a, b, m, k, n } => {
            // out = A [m,k] * B[n,k]^T, g is [m,n]
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                mm_nn(g, &nodes[*b].value, *m, *n, *k, &mut ga);
                accumulate(grads, nodes, *a, &ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; n * k];
                mm_tn(g, &nodes[*a].value, *m, *n, *k, &mut gb);
                accumulate(grads, nodes, *b, &gb);
            }
        }
        Op::SumAll { x } => {
            let gx = vec![g[0]; nodes[*x].value.len()];
            accumulate(grads, nodes, *x, &gx);
        }
        Op::MeanRows { x, rows, cols } => {
            let mut gx = vec![0.0; rows * cols];
            for r in 0..*rows {
                let gr = g[r] / *cols as f64;
                for c in 0..*cols {
                    gx[r * cols + c] = gr;
                }
            }
            accumulate(grads, nodes, *x, &gx);
        }
        Op::SoftmaxRows { x, rows, cols } => {
            let s = &node.value;
            let mut gx = vec![0.0; rows * cols];
            for r in 0..*rows {
                let row = r * cols;
                let mut dot = 0.0;
                for c in 0..*cols {
                    dot += g[row + c] * s[row + c];
                }
                for c in 0..*cols {
                    gx[row + c] = s[row + c] * (g[row + c] - dot);
                }
            }
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Exp { x } => {
            let gx: Vec<f64> = g.iter().zip(&node.value).map(|(gv, y)| gv * y).collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Rsqrt { x } => {
            // y = x^(-1/2) => dy/dx = -y^3 / 2
            let gx: Vec<f64> = g
                .iter()
                .zip(&node.value)
                .map(|(gv, y)| gv * (-0.5 * y * y * y))
                .collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Sigmoid { x } => {
            let gx: Vec<f64> = g
                .iter()
                .zip(&node.value)
                .map(|(gv, y)| gv * y * (1.0 - y))
                .collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Rope { x, phases, rows, cols } => {
            let pairs = cols / 2;
            let mut gx = vec![0.0; rows * cols];
            for r in 0..*rows {
                for p in 0..pairs {
                    let theta = phases[r * pairs + p];
                    let (sin, cos) = theta.sin_cos();
                    let i0 = r * cols + 2 * p;
                    // transpose of the forward rotation
                    gx[i0] = cos * g[i0] + sin * g[i0 + 1];
                    gx[i0 + 1] = -sin * g[i0] + cos * g[i0 + 1];
                }
            }
            accumulate(grads, nodes, *x, &gx);
        }
        Op::SliceRows { x, start, len, cols, src_rows } => {
            let mut gx = vec![0.0; src_rows * cols];
            gx[start * cols..(start + len) * cols].copy_from_slice(g);
            accumulate(grads, nodes, *x, &gx);
        }
        Op::SliceCols { x, start, len, rows, src_cols } => {
            let mut gx = vec![0.0; rows * src_cols];
            for r in 0..*rows {
                for c in 0..*len {
                    gx[r * src_cols + start + c] = g[r * len + c];
                }
            }
            accumulate(grads, nodes, *x, &gx);
        }
        Op::ConcatRows { xs, cols } => {
            let mut offset = 0;
            for &xid in xs {
                let rows = nodes[xid].value.len() / cols;
                let part = &g[offset..offset + rows * cols];
                accumulate(grads, nodes, xid, part);
                offset += rows * cols;
            }
        }
        Op::ConcatCols { xs, rows } => {
            let total_cols = node.value.len() / rows;
            let mut col_off = 0;
            for &xid in xs {
                let cols = nodes[xid].value.len() / rows;
                let mut part = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..cols {
                        part[r * cols + c] = g[r * total_cols + col_off + c];
                    }
                }
                accumulate(grads, nodes, xid, &part);
                col_off += cols;
            }
        }
        Op::Reshape { x } => {
            accumulate(grads, nodes, *x, g);
        }
        Op::StopGrad => {}
    }
}

// ── Matmul kernels ───────────────────────────────────────────────────

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out[m,y] += a[m,x] * b[y,x]^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, x: usize, y: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * x..(i + 1) * x];
        for j in 0..y {
            let brow = &b[j * x..(j + 1) * x];
            let dot: f64 = arow.iter().zip(brow).map(|(&u, &v)| u * v).sum();
            out[i * y + j] += dot;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

// ── Var ops ──────────────────────────────────────────────────────────

impl Var {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copies the node value out as a plain tensor.
    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        Tensor::new(self.shape.clone(), inner.nodes[self.id].value.clone()).expect("node shape")
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.tape.inner.borrow().nodes[self.id].value[0]
    }

    fn check_tape(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch { op })
        }
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op,
                shape: self.shape.clone(),
                reason: "expected a 2-d tensor".into(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn binary(&self, other: &Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_tape(other, op)?;
        let out_shape = broadcast_shapes(op, &self.shape, &other.shape)?;
        let inner = self.tape.inner.borrow();
        let value = broadcast_zip(
            &inner.nodes[self.id].value,
            &self.shape,
            &inner.nodes[other.id].value,
            &other.shape,
            &out_shape,
            f,
        );
        let rg = needs(&inner.nodes, &[self.id, other.id]);
        drop(inner);
        let opv = match op {
            "add" => Op::Add { a: self.id, b: other.id },
            "sub" => Op::Sub { a: self.id, b: other.id },
            "mul" => Op::Mul { a: self.id, b: other.id },
            _ => unreachable!(),
        };
        Ok(self.tape.push(opv, out_shape, value, rg))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b)
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Var {
        let inner = self.tape.inner.borrow();
        let value: Vec<f64> = inner.nodes[self.id].value.iter().map(|v| mul * v + add).collect();
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.tape
            .push(Op::Affine { x: self.id, mul }, self.shape.clone(), value, rg)
    }

    pub fn scale(&self, mul: f64) -> Var {
        self.affine(mul, 0.0)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_tape(other, "matmul")?;
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let inner = self.tape.inner.borrow();
        let mut value = vec![0.0; m * n];
        mm_nn(
            &inner.nodes[self.id].value,
            &inner.nodes[other.id].value,
            m,
            k,
            n,
            &mut value,
        );
        let rg = needs(&inner.nodes, &[self.id, other.id]);
        drop(inner);
        Ok(self.tape.push(
            Op::Matmul { a: self.id, b: other.id, m, k, n },
            vec![m, n],
            value,
            rg,
        ))
    }

    /// `self [m,k] × otherᵀ` where `other` is `[n,k]`.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        self.check_tape(other, "matmul_nt")?;
        let (m, k) = self.rows_cols("matmul_nt")?;
        let (n, k2) = other.rows_cols("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let inner = self.tape.inner.borrow();
        let mut value = vec![0.0; m * n];
        mm_nt(
            &inner.nodes[self.id].value,
            &inner.nodes[other.id].value,
            m,
            k,
            n,
            &mut value,
        );
        let rg = needs(&inner.nodes, &[self.id, other.id]);
        drop(inner);
        Ok(self.tape.push(
            Op::MatmulNt { a: self.id, b: other.id, m, k, n },
            vec![m, n],
            value,
            rg,
        ))
    }

    pub fn sum_all(&self) -> Var {
        let inner = self.tape.inner.borrow();
        let value = vec![inner.nodes[self.id].value.iter().sum()];
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.tape.push(Op::SumAll { x: self.id }, vec![1], value, rg)
    }

    /// Row means of a 2-d tensor: `[r, c] -> [r, 1]`.
    pub fn mean_rows(&self) -> Result<Var> {
        let (rows, cols) = self.rows_cols("mean_rows")?;
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let value: Vec<f64> = (0..rows)
            .map(|r| x[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
            .collect();
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self
            .tape
            .push(Op::MeanRows { x: self.id, rows, cols }, vec![rows, 1], value, rg))
    }

    /// Row-wise softmax of a 2-d tensor. Errors on non-finite logits.
    pub fn softmax_rows(&self) -> Result<Var> {
        let (rows, cols) = self.rows_cols("softmax_rows")?;
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: "softmax_rows",
                    detail: format!("row {r} contains a non-finite logit"),
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                value[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                value[r * cols + c] /= sum;
            }
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self
            .tape
            .push(Op::SoftmaxRows { x: self.id, rows, cols }, self.shape.clone(), value, rg))
    }

    pub fn exp(&self) -> Var {
        let inner = self.tape.inner.borrow();
        let value: Vec<f64> = inner.nodes[self.id].value.iter().map(|v| v.exp()).collect();
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.tape.push(Op::Exp { x: self.id }, self.shape.clone(), value, rg)
    }

    pub fn rsqrt(&self) -> Var {
        let inner = self.tape.inner.borrow();
        let value: Vec<f64> = inner.nodes[self.id]
            .value
            .iter()
            .map(|v| 1.0 / v.sqrt())
            .collect();
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.tape.push(Op::Rsqrt { x: self.id }, self.shape.clone(), value, rg)
    }

    pub fn sigmoid(&self) -> Var {
        let inner = self.tape.inner.borrow();
        let value: Vec<f64> = inner.nodes[self.id]
            .value
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.tape.push(Op::Sigmoid { x: self.id }, self.shape.clone(), value, rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Var> {
        self.mul(&self.sigmoid())
    }

    /// Rotates consecutive column pairs of a `[rows, cols]` tensor by
    /// per-(row, pair) angles; `phases` must be `rows * cols/2` long.
    /// A zero phase is the identity rotation.
    pub fn rope(&self, phases: Rc<Vec<f64>>) -> Result<Var> {
        let (rows, cols) = self.rows_cols("rope")?;
        if cols % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "rope",
                shape: self.shape.clone(),
                reason: "rotary pairs require an even number of columns".into(),
            });
        }
        let pairs = cols / 2;
        if phases.len() != rows * pairs {
            return Err(TensorError::InvalidShape {
                op: "rope",
                shape: vec![phases.len()],
                reason: format!("expected {} phases for a {rows}x{cols} tensor", rows * pairs),
            });
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for p in 0..pairs {
                let (sin, cos) = phases[r * pairs + p].sin_cos();
                let i0 = r * cols + 2 * p;
                value[i0] = cos * x[i0] - sin * x[i0 + 1];
                value[i0 + 1] = sin * x[i0] + cos * x[i0 + 1];
            }
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::Rope { x: self.id, phases, rows, cols },
            self.shape.clone(),
            value,
            rg,
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols("slice_rows")?;
        if start + len > rows {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape: self.shape.clone(),
                reason: format!("rows {start}..{} out of bounds", start + len),
            });
        }
        let inner = self.tape.inner.borrow();
        let value = inner.nodes[self.id].value[start * cols..(start + len) * cols].to_vec();
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::SliceRows { x: self.id, start, len, cols, src_rows: rows },
            vec![len, cols],
            value,
            rg,
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols("slice_cols")?;
        if start + len > cols {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: self.shape.clone(),
                reason: format!("cols {start}..{} out of bounds", start + len),
            });
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.tape.push(
            Op::SliceCols { x: self.id, start, len, rows, src_cols: cols },
            vec![rows, len],
            value,
            rg,
        ))
    }

    /// Stacks 2-d tensors with equal column counts along rows.
    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat_rows",
            shape: vec![],
            reason: "empty part list".into(),
        })?;
        let (_, cols) = first.rows_cols("concat_rows")?;
        let mut total_rows = 0;
        for p in parts {
            first.check_tape(p, "concat_rows")?;
            let (r, c) = p.rows_cols("concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total_rows += r;
        }
        let inner = first.tape.inner.borrow();
        let mut value = Vec::with_capacity(total_rows * cols);
        for p in parts {
            value.extend_from_slice(&inner.nodes[p.id].value);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = needs(&inner.nodes, &ids);
        drop(inner);
        Ok(first
            .tape
            .push(Op::ConcatRows { xs: ids, cols }, vec![total_rows, cols], value, rg))
    }

    /// Stacks 2-d tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat_cols",
            shape: vec![],
            reason: "empty part list".into(),
        })?;
        let (rows, _) = first.rows_cols("concat_cols")?;
        let mut total_cols = 0;
        for p in parts {
            first.check_tape(p, "concat_cols")?;
            let (r, c) = p.rows_cols("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total_cols += c;
        }
        let inner = first.tape.inner.borrow();
        let mut value = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                let c = p.shape[1];
                value.extend_from_slice(&inner.nodes[p.id].value[r * c..(r + 1) * c]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = needs(&inner.nodes, &ids);
        drop(inner);
        Ok(first
            .tape
            .push(Op::ConcatCols { xs: ids, rows }, vec![rows, total_cols], value, rg))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: self.numel(),
            });
        }
        let inner = self.tape.inner.borrow();
        let value = inner.nodes[self.id].value.clone();
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.tape.push(Op::Reshape { x: self.id }, shape, value, rg))
    }

    /// Stop-gradient: identical forward value, no gradient flows through.
    pub fn stop_gradient(&self) -> Var {
        let inner = self.tape.inner.borrow();
        let value = inner.nodes[self.id].value.clone();
        drop(inner);
        self.tape.push(Op::StopGrad, self.shape.clone(), value, false)
    }
}
