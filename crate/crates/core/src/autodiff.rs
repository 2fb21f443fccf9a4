//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation whose inputs carry gradients; a
//! [`Tensor`] is a handle into that tape. Tapes are scoped to one forward
//! pass: build the graph, call [`Tape::backward`] on a scalar loss, then
//! read gradients back with [`Tape::grad`]. Tensors are immutable after
//! creation except for their gradient accumulator, so independent tapes
//! can run on different threads without coordination.
//!
//! Nodes are stored in creation order, which is already a topological
//! order: every operation's inputs precede it. Backward walks the tape
//! once in reverse and accumulates additively across fan-out.

use crate::matrix::Matrix;
use thiserror::Error;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    index: usize,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: &'static str, got: (usize, usize) },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    NotScalar { got: (usize, usize) },
    #[error("backward called twice without resetting gradients")]
    DoubleBackward,
    #[error("class index {class} out of range for {classes} logits")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("tensor does not belong to this tape")]
    ForeignTensor,
}

enum Op {
    /// Constant or variable input; nothing to propagate into.
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Elementwise product with a 1x1 tensor.
    ScaleBy { matrix: usize, scalar: usize },
    Relu(usize),
    Transpose(usize),
    SumRows(usize),
    MeanRows(usize),
    /// Column-wise max over rows; `argmax[c]` is the winning row per
    /// column, ties resolved to the lowest row index at forward time.
    MaxRows { input: usize, argmax: Vec<usize> },
    L2Norm(usize),
    L2Normalize { input: usize, norm: f64 },
    SoftmaxCrossEntropy { logits: usize, class: usize, softmax: Vec<f64> },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Tensor {
        // Ops with no differentiable input need no backward rule.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Tensor { index: self.nodes.len() - 1 }
    }

    fn node(&self, t: Tensor) -> &Node {
        &self.nodes[t.index]
    }

    fn check(&self, t: Tensor) -> Result<(), TensorError> {
        if t.index < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::ForeignTensor)
        }
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool, op: &'static str) -> Result<Tensor, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Insert a value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Tensor, TensorError> {
        self.leaf(value, false, "constant")
    }

    /// Insert a differentiable input; its gradient is populated by
    /// [`Tape::backward`].
    pub fn variable(&mut self, value: Matrix) -> Result<Tensor, TensorError> {
        self.leaf(value, true, "variable")
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.node(t).value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.node(t).value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.node(t).requires_grad
    }

    /// Extract a 1x1 tensor's value.
    pub fn scalar(&self, t: Tensor) -> Result<f64, TensorError> {
        let v = self.value(t);
        if v.is_scalar() {
            Ok(v.get(0, 0))
        } else {
            Err(TensorError::NotScalar { got: v.shape() })
        }
    }

    /// Gradient of the last backward pass, if this tensor received one.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.node(t).grad.as_ref()
    }

    /// Gradient as a matrix, treating "never reached" as zero.
    pub fn grad_or_zeros(&self, t: Tensor) -> Matrix {
        let node = self.node(t);
        node.grad.clone().unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    /// Clear all gradients so another backward pass may run.
    pub fn reset_gradients(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    // ---- forward primitives -------------------------------------------

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if va.cols() != vb.rows() {
            return Err(TensorError::DimensionMismatch { op: "matmul", lhs: va.shape(), rhs: vb.shape() });
        }
        let value = va.matmul(vb);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(value, rg, Op::MatMul(a.index, b.index)))
    }

    fn elementwise(
        &mut self,
        a: Tensor,
        b: Tensor,
        op_name: &'static str,
        f: impl Fn(&Matrix, &Matrix) -> Matrix,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if va.shape() != vb.shape() {
            return Err(TensorError::DimensionMismatch { op: op_name, lhs: va.shape(), rhs: vb.shape() });
        }
        let value = f(va, vb);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(value, rg, op(a.index, b.index)))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(a, b, "add", |x, y| x.add(y), Op::Add)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(a, b, "sub", |x, y| x.sub(y), Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(a, b, "mul", |x, y| x.hadamard(y), Op::Mul)
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor, TensorError> {
        self.check(a)?;
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let value = self.node(a).value.scale(c);
        let rg = self.node(a).requires_grad;
        Ok(self.push(value, rg, Op::Scale(a.index, c)))
    }

    /// Multiply every entry of `a` by a 1x1 tensor `s`; both sides get
    /// gradients.
    pub fn scale_by(&mut self, a: Tensor, s: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        self.check(s)?;
        let sv = &self.node(s).value;
        if !sv.is_scalar() {
            return Err(TensorError::BadShape { op: "scale_by", expected: "1x1 scalar", got: sv.shape() });
        }
        let c = sv.get(0, 0);
        let value = self.node(a).value.scale(c);
        let rg = self.node(a).requires_grad || self.node(s).requires_grad;
        Ok(self.push(value, rg, Op::ScaleBy { matrix: a.index, scalar: s.index }))
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        let value = self.node(a).value.map(|v| v.max(0.0));
        let rg = self.node(a).requires_grad;
        Ok(self.push(value, rg, Op::Relu(a.index)))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        let value = self.node(a).value.transpose();
        let rg = self.node(a).requires_grad;
        Ok(self.push(value, rg, Op::Transpose(a.index)))
    }

    /// Sum over rows; output 1 x cols.
    pub fn sum_rows(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        let value = self.node(a).value.sum_rows();
        let rg = self.node(a).requires_grad;
        Ok(self.push(value, rg, Op::SumRows(a.index)))
    }

    /// Mean over rows; output 1 x cols.
    pub fn mean_rows(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        let v = &self.node(a).value;
        let value = v.sum_rows().scale(1.0 / v.rows() as f64);
        let rg = self.node(a).requires_grad;
        Ok(self.push(value, rg, Op::MeanRows(a.index)))
    }

    /// Column-wise max over rows; output 1 x cols. The winning row per
    /// column is recorded at forward time (ties to the lowest row index)
    /// and the backward pass routes gradient only there.
    pub fn max_rows(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        let v = &self.node(a).value;
        let mut out = Matrix::zeros(1, v.cols());
        let mut argmax = vec![0usize; v.cols()];
        for c in 0..v.cols() {
            let mut best = v.get(0, c);
            let mut best_row = 0;
            for r in 1..v.rows() {
                let x = v.get(r, c);
                if x > best {
                    best = x;
                    best_row = r;
                }
            }
            out.set(0, c, best);
            argmax[c] = best_row;
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(out, rg, Op::MaxRows { input: a.index, argmax }))
    }

    /// Frobenius norm of the whole tensor as a 1x1 scalar.
    pub fn l2_norm(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        let n = self.node(a).value.frobenius_norm();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Matrix::from_vec(1, 1, vec![n]), rg, Op::L2Norm(a.index)))
    }

    /// Normalize a vector to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        self.check(a)?;
        let v = &self.node(a).value;
        if !v.is_vector() {
            return Err(TensorError::BadShape { op: "l2_normalize", expected: "row or column vector", got: v.shape() });
        }
        let norm = v.frobenius_norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(TensorError::NonFinite { op: "l2_normalize" });
        }
        let value = v.scale(1.0 / norm);
        let rg = self.node(a).requires_grad;
        Ok(self.push(value, rg, Op::L2Normalize { input: a.index, norm }))
    }

    /// Softmax cross-entropy of a 1 x C logit row against a class index,
    /// as a 1x1 loss. Uses the max-shifted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Tensor, class: usize) -> Result<Tensor, TensorError> {
        self.check(logits)?;
        let v = &self.node(logits).value;
        if v.rows() != 1 {
            return Err(TensorError::BadShape { op: "softmax_cross_entropy", expected: "1 x C logit row", got: v.shape() });
        }
        let classes = v.cols();
        if class >= classes {
            return Err(TensorError::ClassOutOfRange { class, classes });
        }
        let (loss, softmax) = softmax_cross_entropy_parts(v.row(0), class);
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            rg,
            Op::SoftmaxCrossEntropy { logits: logits.index, class, softmax },
        ))
    }

    // ---- backward ------------------------------------------------------

    fn accumulate(&mut self, index: usize, delta: Matrix) {
        let node = &mut self.nodes[index];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    /// Populate `d(loss)/d(t)` for every tensor reachable from `loss`.
    ///
    /// Gradients accumulate additively across fan-out; each node is
    /// visited exactly once. Calling again without
    /// [`Tape::reset_gradients`] is an error.
    pub fn backward(&mut self, loss: Tensor) -> Result<(), TensorError> {
        self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        let shape = self.node(loss).value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar { got: shape });
        }
        self.backward_done = true;
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.nodes[loss.index].grad = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.index).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("grad present");
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.matmul(&self.nodes[b].value.transpose());
                    let db = self.nodes[a].value.transpose().matmul(&g);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.hadamard(&self.nodes[b].value);
                    let db = g.hadamard(&self.nodes[a].value);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, g.scale(c));
                }
                Op::ScaleBy { matrix, scalar } => {
                    let (m, s) = (*matrix, *scalar);
                    let c = self.nodes[s].value.get(0, 0);
                    let dm = g.scale(c);
                    let ds = g.dot(&self.nodes[m].value);
                    self.accumulate(m, dm);
                    self.accumulate(s, Matrix::from_vec(1, 1, vec![ds]));
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.nodes[a].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, g.hadamard(&mask));
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.accumulate(a, g.transpose());
                }
                Op::SumRows(a) => {
                    let a = *a;
                    let rows = self.nodes[a].value.rows();
                    let mut da = Matrix::zeros(rows, g.cols());
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(g.row(0));
                    }
                    self.accumulate(a, da);
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let rows = self.nodes[a].value.rows();
                    let scaled = g.scale(1.0 / rows as f64);
                    let mut da = Matrix::zeros(rows, g.cols());
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(scaled.row(0));
                    }
                    self.accumulate(a, da);
                }
                Op::MaxRows { input, argmax } => {
                    let input = *input;
                    let argmax = argmax.clone();
                    let rows = self.nodes[input].value.rows();
                    let mut da = Matrix::zeros(rows, g.cols());
                    for (c, &r) in argmax.iter().enumerate() {
                        da.set(r, c, g.get(0, c));
                    }
                    self.accumulate(input, da);
                }
                Op::L2Norm(a) => {
                    let a = *a;
                    let n = self.nodes[i].value.get(0, 0);
                    if n > 0.0 {
                        let da = self.nodes[a].value.scale(g.get(0, 0) / n);
                        self.accumulate(a, da);
                    }
                    // Subgradient 0 at the origin.
                }
                Op::L2Normalize { input, norm } => {
                    let (input, norm) = (*input, *norm);
                    // d(v/|v|) = (g - out * <out, g>) / |v|
                    let out = self.nodes[i].value.clone();
                    let inner = out.dot(&g);
                    let da = g.sub(&out.scale(inner)).scale(1.0 / norm);
                    self.accumulate(input, da);
                }
                Op::SoftmaxCrossEntropy { logits, class, softmax } => {
                    let (logits, class) = (*logits, *class);
                    let mut dz = Matrix::from_vec(1, softmax.len(), softmax.clone());
                    dz.set(0, class, dz.get(0, class) - 1.0);
                    self.accumulate(logits, dz.scale(g.get(0, 0)));
                }
            }
        }
        Ok(())
    }
}

/// Shift-stabilized softmax cross-entropy of a logit slice against a
/// class index; returns the loss and the softmax probabilities. The
/// recorded op and the plain prediction path both go through here so
/// their values agree bitwise.
pub fn softmax_cross_entropy_parts(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum_exp: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    let loss = m + sum_exp.ln() - logits[class];
    let softmax = logits.iter().map(|&x| (x - m).exp() / sum_exp).collect();
    (loss, softmax)
}

/// Max relative error between the reverse-mode gradient of a scalar
/// function and central finite differences with the given step.
///
/// The error at each coordinate is `|ad - fd| / max(1, |fd|)`; the
/// maximum over coordinates is returned. `f` must produce a 1x1 tensor.
pub fn grad_check<F>(f: F, point: &Matrix, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor, TensorError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |m: &Matrix| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let x = tape.variable(m.clone())?;
        let out = f(&mut tape, x)?;
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let x = tape.variable(point.clone())?;
    let out = f(&mut tape, x)?;
    if !tape.value(out).is_scalar() {
        return Err(TensorError::NotScalar { got: tape.value(out).shape() });
    }
    tape.backward(out)?;
    let autodiff = tape.grad_or_zeros(x);

    let mut max_err = 0.0f64;
    for r in 0..point.rows() {
        for c in 0..point.cols() {
            let mut plus = point.clone();
            plus.set(r, c, point.get(r, c) + step);
            let mut minus = point.clone();
            minus.set(r, c, point.get(r, c) - step);
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let err = (autodiff.get(r, c) - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn relu_and_max_rows_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[&[-1.0, 0.0, 2.0]])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0, 2.0]);

        let m = tape.constant(Matrix::from_rows(&[&[1.0, 4.0], &[3.0, 2.0]])).unwrap();
        let mx = tape.max_rows(m).unwrap();
        assert_eq!(tape.value(mx).as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(W x) with W = [[1, 1]] -> grad x = [[1], [1]]
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::from_rows(&[&[1.0, 1.0]])).unwrap();
        let x = tape.variable(Matrix::from_rows(&[&[2.0], &[3.0]])).unwrap();
        let y = tape.matmul(w, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn dead_relu_kills_gradient() {
        let mut tape = Tape::new();
        let c = tape.variable(Matrix::from_vec(1, 1, vec![3.0])).unwrap();
        let neg = tape.constant(Matrix::from_vec(1, 1, vec![-5.0])).unwrap();
        let r = tape.relu(neg).unwrap();
        let loss = tape.mul(r, c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn fanout_accumulates_additively() {
        // loss = sum(x) + sum(x) -> grad = 2 everywhere, exactly.
        let mut tape = Tape::new();
        let x = tape.variable(Matrix::from_rows(&[&[1.0, -2.0]])).unwrap();
        let s1 = tape.sum_rows(x).unwrap();
        let both = tape.add(s1, s1).unwrap();
        let ones = tape.constant(Matrix::from_rows(&[&[1.0], &[1.0]])).unwrap();
        let loss = tape.matmul(both, ones).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut tape = Tape::new();
        let x = tape.variable(Matrix::from_rows(&[&[1.0, 2.0]])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));

        let mut tape = Tape::new();
        let x = tape.variable(Matrix::from_vec(1, 1, vec![2.0])).unwrap();
        let y = tape.l2_norm(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::DoubleBackward)));
        tape.reset_gradients();
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3)).unwrap();
        let b = tape.constant(Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(TensorError::DimensionMismatch { .. })));
        let c = tape.constant(Matrix::zeros(3, 2)).unwrap();
        assert!(matches!(tape.add(a, c), Err(TensorError::DimensionMismatch { .. })));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.variable(Matrix::from_vec(1, 1, vec![f64::NAN])),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn half_norm_squared_gradient_is_exact() {
        // f = 0.5 * |x|^2 -> grad = x
        let point = Matrix::from_rows(&[&[1.0, 2.0]]);
        let err = grad_check(
            |tape, x| {
                let n = tape.l2_norm(x)?;
                let sq = tape.mul(n, n)?;
                tape.scale(sq, 0.5)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn three_layer_composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = random_matrix(&mut rng, 4, 5);
        let w2 = random_matrix(&mut rng, 5, 3);
        let point = random_matrix(&mut rng, 2, 4);
        let err = grad_check(
            |tape, x| {
                let w1 = tape.constant(w1.clone())?;
                let w2 = tape.constant(w2.clone())?;
                let h = tape.matmul(x, w1)?;
                let h = tape.relu(h)?;
                let h = tape.matmul(h, w2)?;
                let pooled = tape.mean_rows(h)?;
                tape.softmax_cross_entropy(pooled, 1)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn every_primitive_matches_finite_differences_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..100 {
            let rows = rng.gen_range(1..=8);
            let cols = rng.gen_range(1..=8);
            let point = random_matrix(&mut rng, rows, cols);
            let w = random_matrix(&mut rng, cols, 3);
            let other = random_matrix(&mut rng, rows, cols);
            // A composite touching matmul, add, sub, mul, scale, relu,
            // transpose, row aggregations, norms and the loss.
            let err = grad_check(
                |tape, x| {
                    let w = tape.constant(w.clone())?;
                    let other = tape.constant(other.clone())?;
                    let mixed = tape.mul(x, other)?;
                    let shifted = tape.add(x, mixed)?;
                    let diffed = tape.sub(shifted, other)?;
                    let act = tape.relu(diffed)?;
                    let proj = tape.matmul(act, w)?;
                    let scaled = tape.scale(proj, 0.7)?;
                    let s = tape.sum_rows(scaled)?;
                    let m = tape.mean_rows(scaled)?;
                    let mx = tape.max_rows(scaled)?;
                    let sm = tape.add(s, m)?;
                    let all = tape.add(sm, mx)?;
                    let allt = tape.transpose(all)?;
                    let norm = tape.l2_norm(allt)?;
                    let logits = tape.transpose(allt)?;
                    let loss = tape.softmax_cross_entropy(logits, 0)?;
                    let combined = tape.add(norm, loss)?;
                    Ok(combined)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "case {case}: relative error {err}");
        }
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dim = rng.gen_range(2..=6);
            let mut point = random_matrix(&mut rng, dim, 1);
            // Keep away from the origin so the map is smooth.
            point.set(0, 0, point.get(0, 0) + 2.0);
            let target = random_matrix(&mut rng, dim, 1);
            let err = grad_check(
                |tape, x| {
                    let unit = tape.l2_normalize(x)?;
                    let target = tape.constant(target.clone())?;
                    let d = tape.sub(unit, target)?;
                    tape.l2_norm(d)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn max_rows_routes_gradient_to_lowest_tied_row() {
        let mut tape = Tape::new();
        let x = tape.variable(Matrix::from_rows(&[&[2.0, 1.0], &[2.0, 3.0]])).unwrap();
        let mx = tape.max_rows(x).unwrap();
        let ones = tape.constant(Matrix::from_rows(&[&[1.0], &[1.0]])).unwrap();
        let loss = tape.matmul(mx, ones).unwrap();
        tape.backward(loss).unwrap();
        // Column 0 ties between both rows: lowest row index wins.
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn determinism_bitwise_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let a = random_matrix(&mut rng, 5, 4);
            let b = random_matrix(&mut rng, 4, 6);
            let mut tape = Tape::new();
            let x = tape.variable(a).unwrap();
            let w = tape.constant(b).unwrap();
            let h = tape.matmul(x, w).unwrap();
            let h = tape.relu(h).unwrap();
            let pooled = tape.sum_rows(h).unwrap();
            let loss = tape.softmax_cross_entropy(pooled, 2).unwrap();
            tape.backward(loss).unwrap();
            (tape.scalar(loss).unwrap(), tape.grad(x).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
