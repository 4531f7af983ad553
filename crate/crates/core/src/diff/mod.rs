//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Node ids are
//! assigned in creation order, so they are already topologically sorted and
//! [`Tape::backward`] simply walks them in reverse.
//!
//! ```
//! use adalea_core::diff::Tape;
//! use adalea_core::Tensor;
//!
//! let mut tape = Tape::checked();
//! let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).item(), Some(6.0));
//! ```

mod gradcheck;

use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

use crate::tensor::{matmul_acc, Tensor};

pub use gradcheck::{grad_check, relative_error};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("expected a scalar (1x1) loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    CausalConv { x: Var, w: Var, b: Var, k: usize },
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    MaskedSoftmax(Var, Vec<bool>),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Records primitive applications for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    checked: bool,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::checked()
    }
}

impl Tape {
    /// A tape that validates every produced value is finite.
    pub fn checked() -> Self {
        Self::with_checks(true)
    }

    /// A tape that skips the per-op finiteness scan.
    pub fn unchecked() -> Self {
        Self::with_checks(false)
    }

    pub fn with_checks(checked: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            checked,
            nodes: Vec::new(),
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

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(DiffError::ForeignVar);
        }
        self.nodes.get(v.index()).ok_or(DiffError::ForeignVar)
    }

    /// The forward value of `v`.
    ///
    /// # Panics
    /// If `v` was created on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("variable from another tape").value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let index = u32::try_from(self.nodes.len()).expect("tape exceeds u32 nodes");
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    /// Records an input, parameter, or constant.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.cols() != bv.rows() {
            return Err(DiffError::Shape {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = av.matmul(bv);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x·W + b`, with the `1×m` bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (
            &self.node(x)?.value,
            &self.node(w)?.value,
            &self.node(b)?.value,
        );
        if xv.cols() != wv.rows() {
            return Err(DiffError::Shape {
                op: "affine",
                left: xv.shape(),
                right: wv.shape(),
            });
        }
        if bv.shape() != (1, wv.cols()) {
            return Err(DiffError::Shape {
                op: "affine bias",
                left: (1, wv.cols()),
                right: bv.shape(),
            });
        }
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        matmul_acc(
            xv.data(),
            xv.rows(),
            xv.cols(),
            wv.data(),
            wv.cols(),
            out.data_mut(),
        );
        self.push(out, Op::Affine(x, w, b), "affine")
    }

    /// Causal 1-D convolution over the rows of `x` (`T×n`).
    ///
    /// `w` stacks `k` taps of shape `n×m` vertically; tap `j` multiplies frame
    /// `t−j`. Frames before the start are zero.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(DiffError::Invalid {
                op: "causal_conv1d",
                reason: "kernel width must be at least 1".into(),
            });
        }
        let (xv, wv, bv) = (
            &self.node(x)?.value,
            &self.node(w)?.value,
            &self.node(b)?.value,
        );
        let n = xv.cols();
        if wv.rows() != k * n {
            return Err(DiffError::Shape {
                op: "causal_conv1d",
                left: (k * n, wv.cols()),
                right: wv.shape(),
            });
        }
        let m = wv.cols();
        if bv.shape() != (1, m) {
            return Err(DiffError::Shape {
                op: "causal_conv1d bias",
                left: (1, m),
                right: bv.shape(),
            });
        }
        let steps = xv.rows();
        let mut out = Tensor::zeros(steps, m);
        for t in 0..steps {
            out.row_mut(t).copy_from_slice(bv.data());
            for j in 0..k.min(t + 1) {
                let tap = &wv.data()[j * n * m..(j + 1) * n * m];
                matmul_acc(xv.row(t - j), 1, n, tap, m, out.row_mut(t));
            }
        }
        self.push(out, Op::CausalConv { x, w, b, k }, "causal_conv1d")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(f64::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(f64::ln);
        self.push(out, Op::Ln(x), "ln")
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        match kind {
            Elementwise::Add => self.add(a, b),
            Elementwise::Mul => self.mul(a, b),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(DiffError::Shape {
                op,
                left: av.shape(),
                right: bv.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.nodes[a.index()]
            .value
            .zip_map(&self.nodes[b.index()].value, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.nodes[a.index()]
            .value
            .zip_map(&self.nodes[b.index()].value, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `s·x` for a constant `s`.
    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v * s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v + c);
        self.push(out, Op::Offset(x), "offset")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi), "clamp")
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.node(x)?.value.sum());
        self.push(out, Op::Sum(x), "sum")
    }

    /// Softmax over the entries of a vector, restricted to `mask == true`.
    ///
    /// Masked entries get weight zero. With no unmasked entry the result is
    /// all zeros.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let sv = &self.node(scores)?.value;
        if sv.len() != mask.len() || (sv.rows() != 1 && sv.cols() != 1) {
            return Err(DiffError::Shape {
                op: "masked_softmax",
                left: sv.shape(),
                right: (mask.len(), 1),
            });
        }
        let out = Tensor::new(sv.rows(), sv.cols(), masked_softmax(sv.data(), mask))?;
        self.push(
            out,
            Op::MaskedSoftmax(scores, mask.to_vec()),
            "masked_softmax",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.transpose();
        self.push(out, Op::Transpose(x), "transpose")
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| DiffError::Invalid {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let rows = self.node(*first)?.value.rows();
        let mut cols = 0;
        for &p in parts {
            let pv = &self.node(p)?.value;
            if pv.rows() != rows {
                return Err(DiffError::Shape {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: pv.shape(),
                });
            }
            cols += pv.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let pv = &self.nodes[p.index()].value;
                out.row_mut(r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
                c0 += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| DiffError::Invalid {
            op: "stack_rows",
            reason: "no inputs".into(),
        })?;
        let cols = self.node(*first)?.value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = &self.node(p)?.value;
            if pv.cols() != cols {
                return Err(DiffError::Shape {
                    op: "stack_rows",
                    left: (rows, cols),
                    right: pv.shape(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(out, Op::StackRows(parts.to_vec()), "stack_rows")
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if start + len > xv.cols() {
            return Err(DiffError::Shape {
                op: "slice_cols",
                left: xv.shape(),
                right: (xv.rows(), start + len),
            });
        }
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start), "slice_cols")
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if start + len > xv.rows() {
            return Err(DiffError::Shape {
                op: "slice_rows",
                left: xv.shape(),
                right: (start + len, xv.cols()),
            });
        }
        let c = xv.cols();
        let out = Tensor::new(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        self.push(out, Op::SliceRows(x, start), "slice_rows")
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.node(loss)?.value;
        if lv.shape() != (1, 1) {
            return Err(DiffError::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index() + 1];
        grads[loss.index()] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.index()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_t(self.val(*b)));
                accumulate(grads, *b, self.val(*a).t_matmul(g));
            }
            Op::Affine(x, w, b) => {
                accumulate(grads, *x, g.matmul_t(self.val(*w)));
                accumulate(grads, *w, self.val(*x).t_matmul(g));
                accumulate(grads, *b, column_sums(g));
            }
            Op::CausalConv { x, w, b, k } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (steps, n, m) = (xv.rows(), xv.cols(), wv.cols());
                let mut dx = Tensor::zeros(steps, n);
                let mut dw = Tensor::zeros(wv.rows(), m);
                for t in 0..steps {
                    let gt = g.row(t);
                    for j in 0..(*k).min(t + 1) {
                        let src = t - j;
                        let tap = &wv.data()[j * n * m..(j + 1) * n * m];
                        let dxr = dx.row_mut(src);
                        for (i, d) in dxr.iter_mut().enumerate() {
                            let wr = &tap[i * m..(i + 1) * m];
                            *d += wr.iter().zip(gt).map(|(w, g)| w * g).sum::<f64>();
                        }
                        let xr = xv.row(src);
                        let dtap = &mut dw.data_mut()[j * n * m..(j + 1) * n * m];
                        for (i, &xi) in xr.iter().enumerate() {
                            for (d, &gv) in dtap[i * m..(i + 1) * m].iter_mut().zip(gt) {
                                *d += xi * gv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, column_sums(g));
            }
            Op::Sigmoid(x) => accumulate(grads, *x, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(x) => accumulate(grads, *x, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Ln(x) => accumulate(grads, *x, g.zip_map(self.val(*x), |g, v| g / v)),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(self.val(*b), |g, v| g * v));
                accumulate(grads, *b, g.zip_map(self.val(*a), |g, v| g * v));
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.map(|v| v * s)),
            Op::Offset(x) => accumulate(grads, *x, g.clone()),
            Op::Clamp(x, lo, hi) => {
                let d = g.zip_map(
                    self.val(*x),
                    |g, v| if v < *lo || v > *hi { 0.0 } else { g },
                );
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let (r, c) = self.val(*x).shape();
                accumulate(grads, *x, Tensor::filled(r, c, g.data()[0]));
            }
            Op::MaskedSoftmax(s, mask) => {
                let w = y.data();
                let dot: f64 = w.iter().zip(g.data()).map(|(w, g)| w * g).sum();
                let data = w
                    .iter()
                    .zip(g.data())
                    .zip(mask)
                    .map(|((&w, &g), &m)| if m { w * (g - dot) } else { 0.0 })
                    .collect();
                let (r, c) = y.shape();
                accumulate(grads, *s, Tensor::new(r, c, data).expect("same shape"));
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.val(p).cols();
                    let mut d = Tensor::zeros(g.rows(), pc);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pc]);
                    }
                    accumulate(grads, p, d);
                    c0 += pc;
                }
            }
            Op::StackRows(parts) => {
                let c = g.cols();
                let mut r0 = 0;
                for &p in parts {
                    let pr = self.val(p).rows();
                    let d = Tensor::new(pr, c, g.data()[r0 * c..(r0 + pr) * c].to_vec())
                        .expect("row block");
                    accumulate(grads, p, d);
                    r0 += pr;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.val(*x).shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, d);
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.val(*x).shape();
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.index()] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over the unmasked entries of `scores`.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; scores.len()];
    }
    let exps: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// contribute to the loss.
    ///
    /// # Panics
    /// If `v` belongs to a different tape.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        match self.grads.get(v.index()) {
            Some(Some(g)) => g.clone(),
            _ => {
                let (r, c) = self.shapes[v.index()];
                Tensor::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn affine_identity() {
        let mut tape = Tape::checked();
        let x = tape.leaf(Tensor::identity(2)).unwrap();
        let w = tape.leaf(Tensor::identity(2)).unwrap();
        let b = tape.leaf(Tensor::zeros(1, 2)).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), &Tensor::identity(2));
    }

    #[test]
    fn affine_hand_example() {
        let mut tape = Tape::checked();
        let x = tape.leaf(t(&[&[1.0, 2.0]])).unwrap();
        let w = tape.leaf(t(&[&[1.0], &[1.0]])).unwrap();
        let b = tape.leaf(t(&[&[3.0]])).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), &t(&[&[6.0]]));
    }

    #[test]
    fn affine_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::checked();
        let x = tape.leaf(Tensor::zeros(1, 3)).unwrap();
        let w = tape.leaf(Tensor::zeros(2, 1)).unwrap();
        let b = tape.leaf(Tensor::zeros(1, 1)).unwrap();
        let err = tape.affine(x, w, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::Shape {
                op: "affine",
                left: (1, 3),
                right: (2, 1)
            }
        );
    }

    #[test]
    fn conv_width_one_is_affine() {
        let xs = t(&[&[1.0, -2.0], &[0.5, 3.0], &[2.0, 0.0]]);
        let w = t(&[&[0.3, -0.1, 0.2], &[1.5, 0.4, -0.7]]);
        let b = t(&[&[0.1, 0.2, 0.3]]);
        let mut tape = Tape::checked();
        let (xv, wv, bv) = (
            tape.leaf(xs).unwrap(),
            tape.leaf(w).unwrap(),
            tape.leaf(b).unwrap(),
        );
        let conv = tape.causal_conv1d(xv, wv, bv, 1).unwrap();
        let aff = tape.affine(xv, wv, bv).unwrap();
        assert_eq!(tape.value(conv), tape.value(aff));
    }

    #[test]
    fn conv_two_tap_hand_recurrence() {
        let (w1, w0, x1, x2) = (0.7, -1.3, 2.0, 5.0);
        let mut tape = Tape::checked();
        let x = tape.leaf(t(&[&[x1], &[x2]])).unwrap();
        let w = tape.leaf(t(&[&[w1], &[w0]])).unwrap();
        let b = tape.leaf(Tensor::zeros(1, 1)).unwrap();
        let y = tape.causal_conv1d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[w1 * x1, w1 * x2 + w0 * x1]);
    }

    #[test]
    fn conv_zero_kernel_gives_zero_output() {
        let mut tape = Tape::checked();
        let x = tape.leaf(Tensor::filled(5, 3, 1.5)).unwrap();
        let w = tape.leaf(Tensor::zeros(6, 4)).unwrap();
        let b = tape.leaf(Tensor::zeros(1, 4)).unwrap();
        let y = tape.causal_conv1d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(5, 4));
    }

    #[test]
    fn conv_rejects_zero_width_and_accepts_wide_kernels() {
        let mut tape = Tape::checked();
        let x = tape.leaf(Tensor::filled(2, 1, 1.0)).unwrap();
        let w0 = tape.leaf(Tensor::zeros(0, 1)).unwrap();
        let b = tape.leaf(Tensor::zeros(1, 1)).unwrap();
        assert!(tape.causal_conv1d(x, w0, b, 0).is_err());
        let w5 = tape.leaf(Tensor::filled(5, 1, 1.0)).unwrap();
        let y = tape.causal_conv1d(x, w5, b, 5).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::checked();
        let x = tape.leaf(t(&[&[0.0, 3f64.ln()]])).unwrap();
        let s = tape.activation(x, Activation::Sigmoid).unwrap();
        let th = tape.activation(x, Activation::Tanh).unwrap();
        assert_eq!(tape.value(s).get(0, 0), 0.5);
        assert!((tape.value(s).get(0, 1) - 0.75).abs() < 1e-15);
        assert_eq!(tape.value(th).get(0, 0), 0.0);
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::checked();
        let a = tape.leaf(t(&[&[2.0, 3.0]])).unwrap();
        let b = tape.leaf(t(&[&[4.0, 5.0]])).unwrap();
        let one = tape.leaf(Tensor::filled(1, 2, 1.0)).unwrap();
        let zero = tape.leaf(Tensor::zeros(1, 2)).unwrap();
        let p = tape.elementwise(a, b, Elementwise::Mul).unwrap();
        assert_eq!(tape.value(p).data(), &[8.0, 15.0]);
        let a1 = tape.elementwise(a, one, Elementwise::Mul).unwrap();
        let a0 = tape.elementwise(a, zero, Elementwise::Add).unwrap();
        assert_eq!(tape.value(a1), tape.value(a));
        assert_eq!(tape.value(a0), tape.value(a));
        let c = tape.leaf(Tensor::zeros(2, 1)).unwrap();
        assert!(matches!(tape.add(a, c), Err(DiffError::Shape { .. })));
    }

    #[test]
    fn masked_softmax_cases() {
        assert_eq!(masked_softmax(&[1.0; 4], &[true; 4]), vec![0.25; 4]);
        assert_eq!(
            masked_softmax(&[5.0, -2.0, 9.0], &[false, true, false]),
            vec![0.0, 1.0, 0.0]
        );
        let w = masked_softmax(&[0.0, 3f64.ln()], &[true, true]);
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        assert_eq!(masked_softmax(&[1.0, 2.0], &[false, false]), vec![0.0, 0.0]);
        let big = masked_softmax(&[1000.0, 1001.0], &[true, true]);
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::checked();
        let x = tape.leaf(t(&[&[1.0, -4.0], &[2.5, 7.0]])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), Tensor::filled(2, 2, 1.0));
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::checked();
        let x = tape.leaf(t(&[&[3.0]])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x), t(&[&[6.0]]));
    }

    #[test]
    fn unreferenced_leaf_gets_zero_gradient() {
        let mut tape = Tape::checked();
        let x = tape.leaf(t(&[&[1.0, 2.0]])).unwrap();
        let unused = tape.leaf(Tensor::filled(3, 2, 9.0)).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(3, 2));
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar_losses() {
        let mut a = Tape::checked();
        let mut b = Tape::checked();
        let xa = a.leaf(Tensor::scalar(1.0)).unwrap();
        let _ = b.leaf(Tensor::scalar(1.0)).unwrap();
        assert_eq!(b.backward(xa).unwrap_err(), DiffError::ForeignVar);
        let v = a.leaf(Tensor::zeros(1, 2)).unwrap();
        assert!(matches!(a.backward(v), Err(DiffError::NotScalar { .. })));
    }

    #[test]
    fn checked_tape_rejects_nan() {
        let mut tape = Tape::checked();
        assert!(tape.leaf(Tensor::scalar(f64::NAN)).is_err());
        let x = tape.leaf(Tensor::scalar(-1.0)).unwrap();
        assert_eq!(tape.ln(x).unwrap_err(), DiffError::NonFinite { op: "ln" });
        let mut loose = Tape::unchecked();
        let y = loose.leaf(Tensor::scalar(-1.0)).unwrap();
        let l = loose.ln(y).unwrap();
        assert!(loose.value(l).get(0, 0).is_nan());
    }
}
