//! The recording tape, its primitive operations and reverse sweep.
//!
//! Every operation appends one node holding its forward value. A node
//! requires a gradient when any of its inputs does, so constants never pay
//! for backward. `backward` walks the nodes once in reverse insertion
//! order, which is a valid reverse topological order because inputs are
//! always recorded before the nodes that consume them.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Negative-side slope of [`Tape::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Second operand may be a `1 x n` row broadcast over the first.
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SpMM(Arc<SparseMatrix>, Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    InnerProduct(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var),
    Softplus(Var),
    Log(Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_RELU_SLOPE * x
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects NaN/Inf in any recorded value.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.record("leaf", value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.record("constant", value, Op::Leaf, false)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(AutodiffError::NonFiniteValue { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.record(name, value, op, requires_grad)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a + b`; `b` may also be a single row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// `a - b` with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    fn broadcast_binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(ta.zip_map(tb, f));
        }
        if tb.rows() == 1 && tb.cols() == ta.cols() {
            let mut out = ta.clone();
            for r in 0..out.rows() {
                for (o, &y) in out.row_mut(r).iter_mut().zip(tb.row(0)) {
                    *o = f(*o, y);
                }
            }
            return Ok(out);
        }
        Err(mismatch(op, ta, tb))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scalar_mul", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    /// Element-wise (Hadamard) product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let value = ta.zip_map(tb, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies row `i` of `a` by `w[i]`, with `w` an `n x 1` column.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.cols() != 1 || tw.rows() != ta.rows() {
            return Err(mismatch("scale_rows", ta, tw));
        }
        let mut value = ta.clone();
        for r in 0..value.rows() {
            let s = tw.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push("scale_rows", value, Op::ScaleRows(a, w), &[a, w])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::IndexOutOfRange {
            op: "concat_rows",
            index: 0,
            len: 0,
        })?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::IndexOutOfRange {
            op: "concat_cols",
            index: 0,
            len: 0,
        })?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: t.rows(),
            });
        }
        let cols = t.cols();
        let value = Tensor::new(len, cols, t.data()[start * cols..(start + len) * cols].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows(a, start), &[a])
    }

    /// Single row `r` of `a` as a `1 x n` tensor.
    pub fn slice_row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, 1)
    }

    /// Stacks rows `a[indices[0]], a[indices[1]], ...`; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, indices: impl Into<Arc<[usize]>>) -> Result<Var> {
        let indices: Arc<[usize]> = indices.into();
        let t = self.value(a);
        let mut value = Tensor::zeros(indices.len(), t.cols());
        for (dst, &i) in indices.iter().enumerate() {
            if i >= t.rows() {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: t.rows(),
                });
            }
            value.row_mut(dst).copy_from_slice(t.row(i));
        }
        self.push("gather_rows", value, Op::GatherRows(a, indices), &[a])
    }

    /// Constant sparse matrix times `a`.
    pub fn spmm(&mut self, sparse: impl Into<Arc<SparseMatrix>>, a: Var) -> Result<Var> {
        let sparse = sparse.into();
        let value = sparse.mul_dense(self.value(a))?;
        self.push("spmm", value, Op::SpMM(sparse, a), &[a])
    }

    /// Sum over rows: `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let value = column_totals(self.value(a));
        self.push("sum_rows", value, Op::SumRows(a), &[a])
    }

    /// Mean over rows: `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(AutodiffError::IndexOutOfRange {
                op: "mean_rows",
                index: 0,
                len: 0,
            });
        }
        let n = t.rows() as f64;
        let value = column_totals(t).map(|v| v / n);
        self.push("mean_rows", value, Op::MeanRows(a), &[a])
    }

    /// Sum across each row: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::column_vector((0..t.rows()).map(|r| t.row(r).iter().sum()).collect());
        self.push("sum_cols", value, Op::SumCols(a), &[a])
    }

    /// `<a, b>` over all elements of two equally shaped tensors, as `1 x 1`.
    pub fn inner_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("inner_product", ta, tb));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push("inner_product", Tensor::scalar(s), Op::InnerProduct(a, b), &[a, b])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.unary("leaky_relu", a, leaky_relu, Op::LeakyRelu(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NotScalar { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let gb = if self.shape(*b) == g.shape() {
                        g.clone()
                    } else {
                        column_totals(g)
                    };
                    self.accumulate(grads, *b, if sign < 0.0 { gb.map(|v| -v) } else { gb });
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::ScaleRows(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = tw.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*w) {
                    let gw = (0..ta.rows())
                        .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *w, Tensor::column_vector(gw));
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::new(rows, cols, data).expect("slice"));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.wants(p) {
                        let gp = Tensor::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c));
                        self.accumulate(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, indices) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (src, &i) in indices.iter().enumerate() {
                    for (d, s) in ga.row_mut(i).iter_mut().zip(g.row(src)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SpMM(sparse, a) => self.accumulate(grads, *a, sparse.tmul_dense(g)),
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let scale = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / rows as f64
                } else {
                    1.0
                };
                let ga = Tensor::from_fn(rows, cols, |_, c| g.get(0, c) * scale);
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::from_fn(rows, cols, |r, _| g.get(r, 0)));
            }
            Op::InnerProduct(a, b) => {
                let s = g.item();
                if self.wants(*a) {
                    self.accumulate(grads, *a, self.value(*b).map(|v| v * s));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).map(|v| v * s));
                }
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
            Op::LeakyRelu(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| if x >= 0.0 { g } else { g * LEAKY_RELU_SLOPE });
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g * sigmoid(x)));
            }
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g / x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(self.value(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn column_totals(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.softplus(x).unwrap();
        assert_abs_diff_eq!(tape.value(y).item(), std::f64::consts::LN_2, epsilon = 1e-15);
        // large arguments stay finite
        let big = tape.constant(Tensor::row_vector(vec![800.0, -800.0])).unwrap();
        let s = tape.softplus(big).unwrap();
        assert_eq!(tape.value(s).data(), &[800.0, 0.0]);
    }

    #[test]
    fn leaky_relu_slope() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![-1.0, 2.0])).unwrap();
        let y = tape.leaky_relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_fn(3, 3, |r, c| (r as f64 - 1.3) * (c as f64 + 0.7));
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3)).unwrap();
        let av = tape.constant(a.clone()).unwrap();
        let p = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(p), &a);
    }

    #[test]
    fn inner_product_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let x = Tensor::row_vector(vec![0.3, -1.2, 2.5]);
        let w = tape.leaf(Tensor::row_vector(vec![1.0, 1.0, 1.0])).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let loss = tape.inner_product(w, xv).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &x);
        assert!(grads.get(xv).is_none());
    }

    #[test]
    fn sigmoid_square_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let s = tape.sigmoid(w).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_abs_diff_eq!(grads.get(w).unwrap().item(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(2, 1)).unwrap();
        assert_eq!(
            tape.backward(w).unwrap_err(),
            AutodiffError::NotScalar { rows: 2, cols: 1 }
        );
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let b = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let loss = tape.scalar_mul(a, 4.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 4.0);
        assert_eq!(grads.get_or_zeros(b, (1, 1)).item(), 0.0);
    }

    #[test]
    fn clamp_gradient_inside_and_outside() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![-2.0, -1.0, 0.3, 1.0, 5.0])).unwrap();
        let c = tape.clamp(x, -1.0, 1.0).unwrap();
        let total = tape.sum_cols(c).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn checked_tape_flags_non_finite() {
        let mut tape = Tape::checked();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert_eq!(
            tape.log(x).unwrap_err(),
            AutodiffError::NonFiniteValue { op: "log" }
        );
        let mut loose = Tape::new();
        let x = loose.constant(Tensor::scalar(0.0)).unwrap();
        let l = loose.log(x).unwrap();
        assert!(loose.value(l).item().is_infinite());
    }

    #[test]
    fn row_broadcast_add_and_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(3, 2)).unwrap();
        let b = tape.leaf(Tensor::row_vector(vec![1.0, -1.0])).unwrap();
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).row(2), &[1.0, -1.0]);
        let t = tape.sum_rows(s).unwrap();
        let loss = tape.sum_cols(t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
        let bad = tape.constant(Tensor::zeros(2, 2)).unwrap();
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(tape.mul(a, b), Err(AutodiffError::ShapeMismatch { op: "mul", .. })));
        assert!(matches!(tape.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(tape.gather_rows(a, vec![5]).is_err());
    }
}
