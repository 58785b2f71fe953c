//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records matrix-level operations as they are evaluated; values
//! are computed eagerly at record time. [`Tape::backward`] runs the exact
//! reverse pass from a scalar loss, accumulating additively into the
//! gradient slots of a [`ParameterSet`], then clears the tape. Nodes built
//! from constants only are marked as not requiring gradients and the
//! reverse pass skips their subtrees.
//!
//! Shape-sensitive operations validate their inputs and return a
//! [`TensorError::DimMismatch`] naming the operation; elementwise unary
//! operations cannot fail and return a [`NodeId`] directly.

use std::rc::Rc;

use crate::params::{ParamId, ParameterSet};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// One weighted edge of a propagation step: (output row, input row, weight).
pub type Edge = (u32, u32, f64);

#[derive(Clone, Debug)]
enum Op {
    Const,
    /// Whole parameter table.
    Param(ParamId),
    /// Row batch gathered straight from a parameter table.
    ParamRows { pid: ParamId, rows: Rc<Vec<usize>> },
    GatherRows { x: NodeId, rows: Rc<Vec<usize>> },
    MatMul { a: NodeId, b: NodeId },
    /// `a * b^T` without materializing the transpose.
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Hadamard product.
    Mul { a: NodeId, b: NodeId },
    /// Elementwise quotient.
    Div { a: NodeId, b: NodeId },
    /// Rows of `a` scaled by the matching entry of a column vector.
    MulColVec { a: NodeId, v: NodeId },
    /// Columns of `a` scaled by the matching entry of a row vector.
    MulRowVec { a: NodeId, v: NodeId },
    /// Per-row inner product -> (n x 1).
    RowwiseDot { a: NodeId, b: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    /// Elementwise mean of same-shape tensors.
    MeanOver { parts: Vec<NodeId> },
    SumAll { a: NodeId },
    /// Row sums -> (n x 1).
    SumRows { a: NodeId },
    /// Main diagonal of a square matrix -> (n x 1).
    Diag { a: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    /// Broadcast addition of a learnable 1x1 node.
    AddScalarNode { a: NodeId, s: NodeId },
    Sigmoid { a: NodeId },
    /// Parametric ReLU with a learnable 1x1 slope.
    PRelu { a: NodeId, slope: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Sqrt { a: NodeId },
    /// -ln(sigmoid(x)), evaluated as softplus(-x) for stability.
    NegLogSigmoid { a: NodeId },
    /// Sum of squared entries -> scalar.
    SqNorm { a: NodeId },
    /// out[index[i]] += a[i] over rows of `a`.
    SegmentSum { a: NodeId, index: Rc<Vec<usize>> },
    /// Sparse-matrix product: out[r] += w * x[c] per edge (r, c, w).
    SpMM { x: NodeId, edges: Rc<Vec<Edge>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recording arena. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- leaves ----

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn param(&mut self, params: &ParameterSet, pid: ParamId) -> NodeId {
        self.push(params.value(pid).clone(), Op::Param(pid), true)
    }

    /// Gathers `rows` of a parameter table; the backward pass scatter-adds
    /// only into those rows (sparse embedding update).
    pub fn param_rows(
        &mut self,
        params: &ParameterSet,
        pid: ParamId,
        rows: &[usize],
    ) -> Result<NodeId, TensorError> {
        let value = gather(params.value(pid), rows, "param_rows")?;
        Ok(self.push(
            value,
            Op::ParamRows {
                pid,
                rows: Rc::new(rows.to_vec()),
            },
            true,
        ))
    }

    // ---- structure ----

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let value = gather(self.value(x), rows, "gather_rows")?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: Rc::new(rows.to_vec()),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(dim_err("concat_cols", (rows, cols), (r, c)));
            }
            cols += c;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                out.row_mut(i)[at..at + c].copy_from_slice(t.row(i));
            }
            at += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(dim_err("concat_rows", (rows, cols), (r, c)));
            }
            rows += r;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..t.rows() {
                out.row_mut(at + i).copy_from_slice(t.row(i));
            }
            at += t.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Elementwise mean over a same-shape set.
    pub fn mean_over(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "mean_over needs at least one part");
        let shape = self.shape(parts[0]);
        let mut out = Tensor::zeros(shape.0, shape.1);
        for &p in parts {
            if self.shape(p) != shape {
                return Err(dim_err("mean_over", shape, self.shape(p)));
            }
            out.add_assign(self.value(p));
        }
        let out = out.map(|v| v / parts.len() as f64);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::MeanOver { parts: parts.to_vec() }, rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNT { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = elementwise(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = elementwise(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = elementwise(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = elementwise(self.value(a), self.value(b), "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div { a, b }, rg))
    }

    pub fn mul_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let rows = self.shape(a).0;
        if self.shape(v) != (rows, 1) {
            return Err(dim_err("mul_col_vec", (rows, 1), self.shape(v)));
        }
        let mut out = self.value(a).clone();
        let vv = self.value(v);
        for i in 0..rows {
            let s = vv.get(i, 0);
            for x in out.row_mut(i) {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, Op::MulColVec { a, v }, rg))
    }

    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.shape(a);
        if self.shape(v) != (1, cols) {
            return Err(dim_err("mul_row_vec", (1, cols), self.shape(v)));
        }
        let mut out = self.value(a).clone();
        let vv = self.value(v);
        for i in 0..rows {
            let row = out.row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                *x *= vv.get(0, j);
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, Op::MulRowVec { a, v }, rg))
    }

    pub fn rowwise_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (rows, _) = self.shape(a);
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("rowwise_dot", self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(rows, 1);
        for i in 0..rows {
            let s: f64 = ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum();
            out.set(i, 0, s);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowwiseDot { a, b }, rg))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll { a }, rg)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), 1);
        for i in 0..t.rows() {
            out.set(i, 0, t.row(i).iter().sum());
        }
        let rg = self.rg(a);
        self.push(out, Op::SumRows { a }, rg)
    }

    pub fn diag(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.shape(a);
        if rows != cols {
            return Err(dim_err("diag", (rows, rows), (rows, cols)));
        }
        let t = self.value(a);
        let mut out = Tensor::zeros(rows, 1);
        for i in 0..rows {
            out.set(i, 0, t.get(i, i));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Diag { a }, rg))
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sq_norm());
        let rg = self.rg(a);
        self.push(value, Op::SqNorm { a }, rg)
    }

    // ---- scalar-parameterized / elementwise ----

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar { a }, rg)
    }

    pub fn add_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(s) != (1, 1) {
            return Err(dim_err("add_scalar_node", (1, 1), self.shape(s)));
        }
        let c = self.value(s).item();
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::AddScalarNode { a, s }, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid { a }, rg)
    }

    pub fn prelu(&mut self, a: NodeId, slope: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(slope) != (1, 1) {
            return Err(dim_err("prelu", (1, 1), self.shape(slope)));
        }
        let s = self.value(slope).item();
        let value = self.value(a).map(|v| if v >= 0.0 { v } else { s * v });
        let rg = self.rg(a) || self.rg(slope);
        Ok(self.push(value, Op::PRelu { a, slope }, rg))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp { a }, rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log { a }, rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::Sqrt { a }, rg)
    }

    /// Numerically stable -ln(sigmoid(x)): softplus(-x) = max(-x, 0) + ln(1 + exp(-| -x |)).
    pub fn neg_log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| softplus(-x));
        let rg = self.rg(a);
        self.push(value, Op::NegLogSigmoid { a }, rg)
    }

    // ---- graph kernels ----

    /// Sums rows of `a` into `out_rows` buckets given per-row target indices.
    pub fn segment_sum(
        &mut self,
        a: NodeId,
        index: &[usize],
        out_rows: usize,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        if index.len() != t.rows() {
            return Err(dim_err("segment_sum", (t.rows(), t.cols()), (index.len(), t.cols())));
        }
        let mut out = Tensor::zeros(out_rows, t.cols());
        for (i, &seg) in index.iter().enumerate() {
            assert!(seg < out_rows, "segment_sum: index {seg} out of range {out_rows}");
            let row = t.row(i);
            let dst = out.row_mut(seg);
            for j in 0..row.len() {
                dst[j] += row[j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::SegmentSum {
                a,
                index: Rc::new(index.to_vec()),
            },
            rg,
        ))
    }

    /// Weighted neighborhood sum: out[r] += w * x[c] for every edge (r, c, w).
    pub fn spmm(
        &mut self,
        edges: Rc<Vec<Edge>>,
        x: NodeId,
        out_rows: usize,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = Tensor::zeros(out_rows, cols);
        for &(r, c, w) in edges.iter() {
            let (r, c) = (r as usize, c as usize);
            assert!(r < out_rows && c < t.rows(), "spmm: edge ({r},{c}) out of range");
            let src = t.row(c);
            let dst = out.row_mut(r);
            for j in 0..cols {
                dst[j] += w * src[j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SpMM { x, edges }, rg))
    }

    // ---- reverse pass ----

    /// Runs the reverse pass from a scalar `loss`, accumulating into the
    /// gradient slots of `params`, then clears the tape.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParameterSet) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape,
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..n).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            // Helper to accumulate into an upstream slot.
            macro_rules! acc {
                ($target:expr, $delta:expr) => {{
                    let t: NodeId = $target;
                    if self.nodes[t.0].requires_grad {
                        let d: Tensor = $delta;
                        match &mut grads[t.0] {
                            Some(existing) => existing.add_assign(&d),
                            slot => *slot = Some(d),
                        }
                    }
                }};
            }
            match self.nodes[idx].op.clone() {
                Op::Const => {}
                Op::Param(pid) => {
                    params.grad_mut(pid).add_assign(&g);
                }
                Op::ParamRows { pid, rows } => {
                    let gp = params.grad_mut(pid);
                    for (i, &r) in rows.iter().enumerate() {
                        let src = g.row(i);
                        let dst = gp.row_mut(r);
                        for j in 0..src.len() {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    let (xr, xc) = self.shape(x);
                    let mut dx = Tensor::zeros(xr, xc);
                    for (i, &r) in rows.iter().enumerate() {
                        let src = g.row(i);
                        let dst = dx.row_mut(r);
                        for j in 0..src.len() {
                            dst[j] += src[j];
                        }
                    }
                    acc!(x, dx);
                }
                Op::MatMul { a, b } => {
                    // y = a b : da += g b^T, db += a^T g
                    if self.nodes[a.0].requires_grad {
                        let da = g.matmul_nt(self.value(b));
                        acc!(a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = self.value(a).matmul_tn(&g);
                        acc!(b, db);
                    }
                }
                Op::MatMulNT { a, b } => {
                    // y = a b^T : da += g b, db += g^T a
                    if self.nodes[a.0].requires_grad {
                        let da = g.matmul(self.value(b));
                        acc!(a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = g.matmul_tn(self.value(a));
                        acc!(b, db);
                    }
                }
                Op::Add { a, b } => {
                    acc!(a, g.clone());
                    acc!(b, g);
                }
                Op::Sub { a, b } => {
                    acc!(a, g.clone());
                    acc!(b, g.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let da = elementwise(&g, self.value(b), "mul", |x, y| x * y)?;
                        acc!(a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = elementwise(&g, self.value(a), "mul", |x, y| x * y)?;
                        acc!(b, db);
                    }
                }
                Op::Div { a, b } => {
                    // y = a/b : da += g/b, db += -g a / b^2
                    if self.nodes[a.0].requires_grad {
                        let da = elementwise(&g, self.value(b), "div", |x, y| x / y)?;
                        acc!(a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let ta = self.value(a);
                        let tb = self.value(b);
                        let mut db = g.clone();
                        for i in 0..db.rows() {
                            let (gr, ar, br) = (db.row_mut(i), ta.row(i), tb.row(i));
                            for j in 0..gr.len() {
                                gr[j] = -gr[j] * ar[j] / (br[j] * br[j]);
                            }
                        }
                        acc!(b, db);
                    }
                }
                Op::MulColVec { a, v } => {
                    if self.nodes[a.0].requires_grad {
                        let vv = self.value(v);
                        let mut da = g.clone();
                        for i in 0..da.rows() {
                            let s = vv.get(i, 0);
                            for x in da.row_mut(i) {
                                *x *= s;
                            }
                        }
                        acc!(a, da);
                    }
                    if self.nodes[v.0].requires_grad {
                        let ta = self.value(a);
                        let mut dv = Tensor::zeros(g.rows(), 1);
                        for i in 0..g.rows() {
                            let s: f64 = g.row(i).iter().zip(ta.row(i)).map(|(x, y)| x * y).sum();
                            dv.set(i, 0, s);
                        }
                        acc!(v, dv);
                    }
                }
                Op::MulRowVec { a, v } => {
                    if self.nodes[a.0].requires_grad {
                        let vv = self.value(v);
                        let mut da = g.clone();
                        for i in 0..da.rows() {
                            let row = da.row_mut(i);
                            for (j, x) in row.iter_mut().enumerate() {
                                *x *= vv.get(0, j);
                            }
                        }
                        acc!(a, da);
                    }
                    if self.nodes[v.0].requires_grad {
                        let ta = self.value(a);
                        let mut dv = Tensor::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            let (gr, ar) = (g.row(i), ta.row(i));
                            let dst = dv.row_mut(0);
                            for j in 0..gr.len() {
                                dst[j] += gr[j] * ar[j];
                            }
                        }
                        acc!(v, dv);
                    }
                }
                Op::RowwiseDot { a, b } => {
                    // y_i = a_i . b_i : da_i += g_i b_i, db_i += g_i a_i
                    if self.nodes[a.0].requires_grad {
                        let tb = self.value(b);
                        let mut da = tb.clone();
                        for i in 0..da.rows() {
                            let s = g.get(i, 0);
                            for x in da.row_mut(i) {
                                *x *= s;
                            }
                        }
                        acc!(a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let ta = self.value(a);
                        let mut db = ta.clone();
                        for i in 0..db.rows() {
                            let s = g.get(i, 0);
                            for x in db.row_mut(i) {
                                *x *= s;
                            }
                        }
                        acc!(b, db);
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut at = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.nodes[p.0].requires_grad {
                            let mut dp = Tensor::zeros(rows, cols);
                            for i in 0..rows {
                                dp.row_mut(i).copy_from_slice(&g.row(i)[at..at + cols]);
                            }
                            acc!(p, dp);
                        }
                        at += cols;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut at = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.nodes[p.0].requires_grad {
                            let mut dp = Tensor::zeros(rows, cols);
                            for i in 0..rows {
                                dp.row_mut(i).copy_from_slice(g.row(at + i));
                            }
                            acc!(p, dp);
                        }
                        at += rows;
                    }
                }
                Op::MeanOver { parts } => {
                    let k = parts.len() as f64;
                    for p in parts {
                        if self.nodes[p.0].requires_grad {
                            acc!(p, g.map(|v| v / k));
                        }
                    }
                }
                Op::SumAll { a } => {
                    let s = g.item();
                    let (rows, cols) = self.shape(a);
                    acc!(a, Tensor::filled(rows, cols, s));
                }
                Op::SumRows { a } => {
                    let (rows, cols) = self.shape(a);
                    let mut da = Tensor::zeros(rows, cols);
                    for i in 0..rows {
                        let s = g.get(i, 0);
                        for x in da.row_mut(i) {
                            *x = s;
                        }
                    }
                    acc!(a, da);
                }
                Op::Diag { a } => {
                    let (rows, cols) = self.shape(a);
                    let mut da = Tensor::zeros(rows, cols);
                    for i in 0..rows {
                        da.set(i, i, g.get(i, 0));
                    }
                    acc!(a, da);
                }
                Op::SqNorm { a } => {
                    let s = 2.0 * g.item();
                    acc!(a, self.value(a).map(|v| s * v));
                }
                Op::Scale { a, c } => {
                    acc!(a, g.map(|v| v * c));
                }
                Op::AddScalar { a } => {
                    acc!(a, g);
                }
                Op::AddScalarNode { a, s } => {
                    acc!(a, g.clone());
                    acc!(s, Tensor::scalar(g.sum()));
                }
                Op::Sigmoid { a } => {
                    // dy/dx = y (1 - y), using the stored output
                    let y = &self.nodes[idx].value;
                    let mut da = g;
                    for i in 0..da.rows() {
                        let (gr, yr) = (da.row_mut(i), y.row(i));
                        for j in 0..gr.len() {
                            gr[j] *= yr[j] * (1.0 - yr[j]);
                        }
                    }
                    acc!(a, da);
                }
                Op::PRelu { a, slope } => {
                    let s = self.value(slope).item();
                    let x = self.value(a);
                    if self.nodes[a.0].requires_grad {
                        let mut da = g.clone();
                        for i in 0..da.rows() {
                            let (gr, xr) = (da.row_mut(i), x.row(i));
                            for j in 0..gr.len() {
                                if xr[j] < 0.0 {
                                    gr[j] *= s;
                                }
                            }
                        }
                        acc!(a, da);
                    }
                    if self.nodes[slope.0].requires_grad {
                        let mut ds = 0.0;
                        for i in 0..g.rows() {
                            let (gr, xr) = (g.row(i), x.row(i));
                            for j in 0..gr.len() {
                                if xr[j] < 0.0 {
                                    ds += gr[j] * xr[j];
                                }
                            }
                        }
                        acc!(slope, Tensor::scalar(ds));
                    }
                }
                Op::Exp { a } => {
                    let y = &self.nodes[idx].value;
                    let mut da = g;
                    for i in 0..da.rows() {
                        let (gr, yr) = (da.row_mut(i), y.row(i));
                        for j in 0..gr.len() {
                            gr[j] *= yr[j];
                        }
                    }
                    acc!(a, da);
                }
                Op::Log { a } => {
                    let x = self.value(a);
                    let mut da = g;
                    for i in 0..da.rows() {
                        let (gr, xr) = (da.row_mut(i), x.row(i));
                        for j in 0..gr.len() {
                            gr[j] /= xr[j];
                        }
                    }
                    acc!(a, da);
                }
                Op::Sqrt { a } => {
                    // dy/dx = 1 / (2 sqrt(x)), using the stored output
                    let y = &self.nodes[idx].value;
                    let mut da = g;
                    for i in 0..da.rows() {
                        let (gr, yr) = (da.row_mut(i), y.row(i));
                        for j in 0..gr.len() {
                            gr[j] /= 2.0 * yr[j];
                        }
                    }
                    acc!(a, da);
                }
                Op::NegLogSigmoid { a } => {
                    // d/dx [-ln sigmoid(x)] = -sigmoid(-x)
                    let x = self.value(a);
                    let mut da = g;
                    for i in 0..da.rows() {
                        let (gr, xr) = (da.row_mut(i), x.row(i));
                        for j in 0..gr.len() {
                            gr[j] *= -sigmoid(-xr[j]);
                        }
                    }
                    acc!(a, da);
                }
                Op::SegmentSum { a, index } => {
                    let (rows, cols) = self.shape(a);
                    let mut da = Tensor::zeros(rows, cols);
                    for (i, &seg) in index.iter().enumerate() {
                        da.row_mut(i).copy_from_slice(g.row(seg));
                    }
                    acc!(a, da);
                }
                Op::SpMM { x, edges } => {
                    let (rows, cols) = self.shape(x);
                    let mut dx = Tensor::zeros(rows, cols);
                    for &(r, c, w) in edges.iter() {
                        let src = g.row(r as usize);
                        let dst = dx.row_mut(c as usize);
                        for j in 0..cols {
                            dst[j] += w * src[j];
                        }
                    }
                    acc!(x, dx);
                }
            }
        }
        self.nodes.clear();
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + e^x), stable for large |x|.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dim_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> TensorError {
    TensorError::DimMismatch { op, lhs, rhs }
}

fn elementwise(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x = f(*x, *y);
    }
    Ok(out)
}

fn gather(table: &Tensor, rows: &[usize], op: &'static str) -> Result<Tensor, TensorError> {
    let mut out = Tensor::zeros(rows.len(), table.cols());
    for (i, &r) in rows.iter().enumerate() {
        if r >= table.rows() {
            return Err(TensorError::DimMismatch {
                op,
                lhs: table.shape(),
                rhs: (r, 0),
            });
        }
        out.row_mut(i).copy_from_slice(table.row(r));
    }
    Ok(out)
}
