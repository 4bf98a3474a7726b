//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table.
//!
//! Constants (including detached values) never receive gradients, which is
//! how truncated backpropagation through the denoising loop is expressed.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed linear mixing of rows: `out[o] = Σ w · in[i]` for each `(o, i, w)`.
///
/// Bilinear resizing, pooling and cropping of `(pixels, channels)` tensors
/// are all expressed this way.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    pub in_rows: usize,
    pub out_rows: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl RowMix {
    pub fn apply(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.rows(), self.in_rows, "row mix input size mismatch");
        let cols = input.cols();
        let mut out = Tensor::zeros(self.out_rows, cols);
        for &(o, i, w) in &self.entries {
            for c in 0..cols {
                let v = out.get(o, c) + w * input.get(i, c);
                out.set(o, c, v);
            }
        }
        out
    }

    fn apply_transposed(&self, grad_out: &Tensor) -> Tensor {
        let cols = grad_out.cols();
        let mut out = Tensor::zeros(self.in_rows, cols);
        for &(o, i, w) in &self.entries {
            for c in 0..cols {
                let v = out.get(i, c) + w * grad_out.get(o, c);
                out.set(i, c, v);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulByScalar(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    Transpose(Var),
    Sum(Var),
    Reshape(Var),
    RowMix(Var, Arc<RowMix>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward evaluation.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `var`, or `None`
    /// when no path connects them.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], with a zero tensor of the right shape in
    /// place of a missing path.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
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

    /// Bytes held by recorded values.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * core::mem::size_of::<f64>()).sum()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// Copies `var`'s value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1×c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        assert_eq!(self.shape(row), (1, ca), "add_row expects a 1x{ca} row");
        let r = self.value(row).clone();
        let value = Tensor::from_fn(ra, ca, |i, j| self.value(a).get(i, j) + r.get(0, j));
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by the `1×c` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        assert_eq!(self.shape(row), (1, ca), "mul_row expects a 1x{ca} row");
        let r = self.value(row).clone();
        let value = Tensor::from_fn(ra, ca, |i, j| self.value(a).get(i, j) * r.get(0, j));
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        self.push(value, Op::AddScalar(a))
    }

    /// `a · s` where `s` is a `1×1` node.
    pub fn mul_by_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_by_scalar expects a 1x1 scale");
        let k = self.value(s).item();
        let value = self.value(a).scale(k);
        self.push(value, Op::MulByScalar(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.push(value, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 / v);
        self.push(value, Op::Recip(a))
    }

    /// `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|v| v.max(floor));
        self.push(value, Op::ClampMin(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let max = (0..cols).map(|c| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..cols {
                let e = libm::exp(x.get(r, c) - max);
                out.set(r, c, e);
                denom += e;
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / denom);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Views `a` under a new shape with the same row-major buffer.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(rows, cols)
            .expect("reshape must preserve the element count");
        self.push(value, Op::Reshape(a))
    }

    pub fn row_mix(&mut self, a: Var, mix: Arc<RowMix>) -> Var {
        let value = mix.apply(self.value(a));
        self.push(value, Op::RowMix(a, mix))
    }

    /// `Σ a ⊙ b` as a `1×1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Divides `a` by its Euclidean norm (with a tiny floor under the root).
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let ss = self.sum(sq);
        let ss = self.add_scalar(ss, 1e-24);
        let norm = self.sqrt(ss);
        let inv = self.recip(norm);
        self.mul_by_scalar(a, inv)
    }

    /// Gradients of the scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose());
                    let gb = self.value(*a).transpose().matmul(&g);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                    accumulate(&mut grads, &self.nodes, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &self.nodes, *a, g.clone());
                    accumulate(&mut grads, &self.nodes, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &self.nodes, *a, g.clone());
                    accumulate(&mut grads, &self.nodes, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                    accumulate(&mut grads, &self.nodes, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let grow = column_sums(&g);
                    accumulate(&mut grads, &self.nodes, *a, g.clone());
                    accumulate(&mut grads, &self.nodes, *row, grow);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    let av = self.value(*a);
                    let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * r.get(0, j));
                    let prod = g.zip_map(av, |x, y| x * y);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                    accumulate(&mut grads, &self.nodes, *row, column_sums(&prod));
                }
                Op::Scale(a, k) => accumulate(&mut grads, &self.nodes, *a, g.scale(*k)),
                Op::AddScalar(a) => accumulate(&mut grads, &self.nodes, *a, g.clone()),
                Op::MulByScalar(a, s) => {
                    let k = self.value(*s).item();
                    let gs = g.zip_map(self.value(*a), |x, y| x * y).sum();
                    accumulate(&mut grads, &self.nodes, *a, g.scale(k));
                    accumulate(&mut grads, &self.nodes, *s, Tensor::scalar(gs));
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * 0.5 / y);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = g.zip_map(&node.value, |x, y| -x * y * y);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > *floor { x } else { 0.0 });
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - inner));
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, &self.nodes, *a, g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, &self.nodes, *a, Tensor::filled(r, c, g.item()));
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = g.clone().reshape(r, c).expect("reshape gradient");
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::RowMix(a, mix) => {
                    accumulate(&mut grads, &self.nodes, *a, mix.apply_transposed(&g));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], var: Var, g: Tensor) {
    if matches!(nodes[var.0].op, Op::Const) {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    Tensor::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g.get(i, j)).sum())
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}
