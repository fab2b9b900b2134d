//! Recording tape and the reverse pass.
//!
//! Operations are methods on [`Tape`]; each one evaluates eagerly, stores its
//! output on the tape and returns a [`Var`] handle. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm, Tensor};

/// Lower clamp applied to the operands of `log` and `pow`.
pub const CLAMP_MIN: f64 = 1e-12;
/// Norm floor used by row normalization.
pub const NORM_FLOOR: f64 = 1e-12;
/// Degree floor used by the normalized adjacency.
pub const DEGREE_FLOOR: f64 = 1e-8;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    /// Position of this value on its tape.
    pub fn node_id(&self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    ScaleRows(usize, usize),
    Affine(usize, f64),
    Pow(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    PickCols(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    RowSums(usize),
    MeanOverRows(usize),
    NormalizeRows(usize, Vec<f64>),
    NormAdj(Box<NormAdjRecord>),
}

#[derive(Debug)]
struct NormAdjRecord {
    edge_w: usize,
    self_w: usize,
    edges: Vec<(usize, usize)>,
    inv_sqrt_deg: Vec<f64>,
    degree: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    frozen: Option<Vec<Tensor>>,
    detach_count: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            frozen: None,
            detach_count: 0,
        }
    }

    /// A tape whose `detach` calls return the given values in order instead
    /// of copying their input. Used to evaluate the surrogate objective that
    /// the reverse pass differentiates: detached quantities held fixed at a
    /// reference point.
    pub fn with_frozen_detach(values: Vec<Tensor>) -> Self {
        let mut tape = Self::new();
        tape.frozen = Some(values);
        tape
    }

    /// Values produced by every `detach` call so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Detach))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "foreign variable");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(&self.nodes[v.idx].value)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn finite(op: &'static str, t: &Tensor) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite { op })
        }
    }

    /// Same values, cut off from the reverse pass.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let source = self.check(x)?;
        let value = match self.frozen.as_ref().and_then(|f| f.get(self.detach_count)) {
            Some(frozen) if frozen.shape() == source.shape() => frozen.clone(),
            Some(frozen) => {
                return Err(AutodiffError::Shape {
                    op: "detach (frozen)",
                    left: source.shape(),
                    right: frozen.shape(),
                })
            }
            None => source.clone(),
        };
        self.detach_count += 1;
        Ok(self.push(value, Op::Detach, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.cols() != tb.rows() {
            return Err(AutodiffError::Shape {
                op: "matmul",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(false, ta, false, tb, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a.idx, b.idx), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::Shape {
                op,
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a.idx, b.idx), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a.idx, b.idx), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a.idx, b.idx), rg))
    }

    /// `x + 1 b`: adds the `1 x k` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.check(x)?, self.check(b)?);
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(AutodiffError::Shape {
                op: "add_row",
                left: tx.shape(),
                right: tb.shape(),
            });
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x.idx, b.idx), rg))
    }

    /// Multiplies row `r` of `x` by `w[r]`, where `w` is a column vector.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.check(x)?, self.check(w)?);
        if tw.cols() != 1 || tw.rows() != tx.rows() {
            return Err(AutodiffError::Shape {
                op: "scale_rows",
                left: tx.shape(),
                right: tw.shape(),
            });
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let s = tw.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::ScaleRows(x.idx, w.idx), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.check(x)?.map(|v| scale * v + shift);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Affine(x.idx, scale), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, 1.0, c)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    /// `max(x, 1e-12)^p`.
    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let tx = self.check(x)?;
        Self::finite("pow", tx)?;
        let out = tx.map(|v| v.max(CLAMP_MIN).powf(p));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Pow(x.idx, p), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(sigmoid);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sigmoid(x.idx), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(|v| v.max(0.0));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Relu(x.idx), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        Self::finite("exp", tx)?;
        let out = tx.map(f64::exp);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Exp(x.idx), rg))
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        Self::finite("log", tx)?;
        let out = tx.map(|v| v.max(CLAMP_MIN).ln());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Log(x.idx), rg))
    }

    /// Softmax over each row, shifted by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        Self::finite("softmax_rows", tx)?;
        let mut out = tx.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x.idx), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.transpose();
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x.idx), rg))
    }

    /// Side-by-side concatenation: all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.check(*first)?.rows();
        let mut cols = 0;
        for p in parts {
            let t = self.check(*p)?;
            if t.rows() != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    left: self.value(*first).shape(),
                    right: t.shape(),
                });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.idx].value.row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), rg))
    }

    /// Stacks parts vertically: all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = self.check(*first)?.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.check(*p)?;
            if t.cols() != cols {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    left: self.value(*first).shape(),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.idx).collect()), rg))
    }

    /// Output row `i` is input row `index[i]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.check(x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.rows()) {
            return Err(AutodiffError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {} rows", tx.rows()),
            });
        }
        let mut data = Vec::with_capacity(index.len() * tx.cols());
        for &i in index {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(index.len(), tx.cols(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x.idx, index.to_vec()), rg))
    }

    /// Picks element `(r, cols[r])` from every row, giving a column vector.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.check(x)?;
        if cols.len() != tx.rows() || cols.iter().any(|&c| c >= tx.cols()) {
            return Err(AutodiffError::Invalid {
                op: "pick_cols",
                msg: format!("{} column picks for shape {:?}", cols.len(), tx.shape()),
            });
        }
        let data = cols.iter().enumerate().map(|(r, &c)| tx.get(r, c)).collect();
        let out = Tensor::column(data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::PickCols(x.idx, cols.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(x)?.sum());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum(x.idx), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        if tx.is_empty() {
            return Err(AutodiffError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let out = Tensor::scalar(tx.sum() / tx.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean(x.idx), rg))
    }

    /// Sum of each row, as an `n x 1` column.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let out = Tensor::column((0..tx.rows()).map(|r| tx.row(r).iter().sum()).collect());
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowSums(x.idx), rg))
    }

    /// Mean of the rows, as a `1 x k` row.
    pub fn mean_over_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        if tx.rows() == 0 {
            return Err(AutodiffError::Invalid {
                op: "mean_over_rows",
                msg: "no rows".into(),
            });
        }
        let n = tx.rows() as f64;
        let mut acc = vec![0.0; tx.cols()];
        for r in 0..tx.rows() {
            for (a, v) in acc.iter_mut().zip(tx.row(r)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::row_vector(acc);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanOverRows(x.idx), rg))
    }

    /// Divides every row by its L2 norm (floored at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let mut out = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows(x.idx, norms), rg))
    }

    /// Symmetric normalized weighted adjacency `D^-1/2 (A + S) D^-1/2`.
    ///
    /// `edge_w` is an `E x 1` column of edge weights applied to both
    /// orientations of each edge, `self_w` an `N x 1` column of self-loop
    /// weights. Degrees are floored at 1e-8.
    pub fn normalized_adjacency(
        &mut self,
        edge_w: Var,
        self_w: Var,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        let (te, ts) = (self.check(edge_w)?, self.check(self_w)?);
        let n = ts.rows();
        if ts.cols() != 1 || te.cols() != 1 || te.rows() != edges.len() {
            return Err(AutodiffError::Shape {
                op: "normalized_adjacency",
                left: te.shape(),
                right: ts.shape(),
            });
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !te.data().iter().all(in_unit) || !ts.data().iter().all(in_unit) {
            return Err(AutodiffError::Invalid {
                op: "normalized_adjacency",
                msg: "weights must lie in [0, 1]".into(),
            });
        }
        if let Some(&(u, v)) = edges.iter().find(|&&(u, v)| u >= n || v >= n || u == v) {
            return Err(AutodiffError::Invalid {
                op: "normalized_adjacency",
                msg: format!("bad edge ({u}, {v}) for {n} nodes"),
            });
        }
        let tilde = weighted_adjacency(te.data(), ts.data(), edges, n);
        let degree: Vec<f64> = (0..n).map(|i| tilde.row(i).iter().sum()).collect();
        let inv_sqrt_deg: Vec<f64> = degree.iter().map(|d| d.max(DEGREE_FLOOR).powf(-0.5)).collect();
        let mut out = tilde;
        for i in 0..n {
            let si = inv_sqrt_deg[i];
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v *= si * inv_sqrt_deg[j];
            }
        }
        let rg = self.rg(edge_w) || self.rg(self_w);
        let record = NormAdjRecord {
            edge_w: edge_w.idx,
            self_w: self_w.idx,
            edges: edges.to_vec(),
            inv_sqrt_deg,
            degree,
        };
        Ok(self.push(out, Op::NormAdj(Box::new(record)), rg))
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.check(loss)?;
        if t.shape() != [1, 1] {
            return Err(AutodiffError::NotScalar(t.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.idx].requires_grad {
            return Ok(Gradients {
                tape: self.id,
                grads,
            });
        }
        grads[loss.idx] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Intermediate buffers are kept; only requires_grad nodes are exposed.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let buf = slot(grads, *a, ta.shape());
                    gemm(false, g, true, tb, buf, 1.0);
                }
                if self.wants(*b) {
                    let buf = slot(grads, *b, tb.shape());
                    gemm(true, ta, false, g, buf, 1.0);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                if self.wants(*b) {
                    self.accum(grads, *b, &g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accum(grads, *a, &zip(g, self.val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accum(grads, *b, &zip(g, self.val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, b) => {
                self.accum(grads, *x, g);
                if self.wants(*b) {
                    let mut col = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (c, v) in col.iter_mut().zip(g.row(r)) {
                            *c += v;
                        }
                    }
                    self.accum(grads, *b, &Tensor::row_vector(col));
                }
            }
            Op::ScaleRows(x, w) => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let s = tw.data()[r];
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accum(grads, *x, &dx);
                }
                if self.wants(*w) {
                    let dw = (0..g.rows())
                        .map(|r| dot(g.row(r), tx.row(r)))
                        .collect();
                    self.accum(grads, *w, &Tensor::column(dw));
                }
            }
            Op::Affine(x, s) => {
                if self.wants(*x) {
                    self.accum(grads, *x, &g.map(|v| v * s));
                }
            }
            Op::Pow(x, p) => {
                if self.wants(*x) {
                    let dx = zip(g, self.val(*x), |gv, xv| {
                        if xv > CLAMP_MIN {
                            gv * p * xv.powf(p - 1.0)
                        } else {
                            0.0
                        }
                    });
                    self.accum(grads, *x, &dx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    self.accum(grads, *x, &zip(g, y, |gv, yv| gv * yv * (1.0 - yv)));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let dx = zip(g, self.val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    self.accum(grads, *x, &dx);
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    self.accum(grads, *x, &zip(g, y, |gv, yv| gv * yv));
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    let dx = zip(g, self.val(*x), |gv, xv| {
                        if xv > CLAMP_MIN {
                            gv / xv
                        } else {
                            0.0
                        }
                    });
                    self.accum(grads, *x, &dx);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let s = dot(gr, yr);
                        for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - s);
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    self.accum(grads, *x, &g.transpose());
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.val(p).cols();
                    if self.wants(p) {
                        let mut dp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accum(grads, p, &dp);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.val(p).rows();
                    if self.wants(p) {
                        let cols = g.cols();
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accum(grads, p, &Tensor::new(rows, cols, data).expect("shape"));
                    }
                    offset += rows;
                }
            }
            Op::GatherRows(x, index) => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, self.val(*x).shape());
                    for (i, &src) in index.iter().enumerate() {
                        for (d, v) in buf.row_mut(src).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::PickCols(x, cols) => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, self.val(*x).shape());
                    for (r, &c) in cols.iter().enumerate() {
                        let v = buf.get(r, c) + g.data()[r];
                        buf.set(r, c, v);
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let s = self.val(*x).shape();
                    self.accum(grads, *x, &Tensor::filled(s[0], s[1], g.item()));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let t = self.val(*x);
                    let v = g.item() / t.len() as f64;
                    self.accum(grads, *x, &Tensor::filled(t.rows(), t.cols(), v));
                }
            }
            Op::RowSums(x) => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, self.val(*x).shape());
                    for r in 0..buf.rows() {
                        let gv = g.data()[r];
                        buf.row_mut(r).iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::MeanOverRows(x) => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, self.val(*x).shape());
                    let n = buf.rows() as f64;
                    for r in 0..buf.rows() {
                        for (d, gv) in buf.row_mut(r).iter_mut().zip(g.data()) {
                            *d += gv / n;
                        }
                    }
                }
            }
            Op::NormalizeRows(x, norms) => {
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let norm = norms[r];
                        if norm > NORM_FLOOR {
                            let s = dot(gr, yr);
                            for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                                *d = (gv - yv * s) / norm;
                            }
                        } else {
                            for (d, gv) in dx.row_mut(r).iter_mut().zip(gr) {
                                *d = gv / NORM_FLOOR;
                            }
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::NormAdj(rec) => self.norm_adj_backward(rec, g, grads),
        }
    }

    fn norm_adj_backward(&self, rec: &NormAdjRecord, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let te = self.val(rec.edge_w);
        let ts = self.val(rec.self_w);
        let n = ts.rows();
        let s = &rec.inv_sqrt_deg;
        let tilde = weighted_adjacency(te.data(), ts.data(), &rec.edges, n);
        // dL/ds_i = sum_j (G_ij + G_ji) A_ij s_j, then chain through s = d^-1/2.
        let mut grad_deg = vec![0.0; n];
        for i in 0..n {
            if rec.degree[i] <= DEGREE_FLOOR {
                continue;
            }
            let mut ds = 0.0;
            for j in 0..n {
                let a = tilde.get(i, j);
                if a != 0.0 {
                    ds += (g.get(i, j) + g.get(j, i)) * a * s[j];
                }
            }
            grad_deg[i] = ds * -0.5 * rec.degree[i].powf(-1.5);
        }
        if self.wants(rec.edge_w) {
            let de = rec
                .edges
                .iter()
                .map(|&(u, v)| (g.get(u, v) + g.get(v, u)) * s[u] * s[v] + grad_deg[u] + grad_deg[v])
                .collect();
            self.accum(grads, rec.edge_w, &Tensor::column(de));
        }
        if self.wants(rec.self_w) {
            let dself = (0..n).map(|i| g.get(i, i) * s[i] * s[i] + grad_deg[i]).collect();
            self.accum(grads, rec.self_w, &Tensor::column(dself));
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], idx: usize, g: &Tensor) {
        if !self.wants(idx) {
            return;
        }
        match &mut grads[idx] {
            Some(buf) => buf.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], idx: usize, shape: [usize; 2]) -> &'a mut Tensor {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Dense symmetric weighted adjacency with self-loop weights on the diagonal.
pub fn weighted_adjacency(
    edge_w: &[f64],
    self_w: &[f64],
    edges: &[(usize, usize)],
    n: usize,
) -> Tensor {
    let mut a = Tensor::zeros(n, n);
    for (&(u, v), &w) in edges.iter().zip(edge_w) {
        a.set(u, v, a.get(u, v) + w);
        a.set(v, u, a.get(v, u) + w);
    }
    for (i, &w) in self_w.iter().enumerate() {
        a.set(i, i, a.get(i, i) + w);
    }
    a
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no gradient reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
}
