//! Dense reverse-mode differentiation over 2-D matrices.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node and
//! return a [`Tensor`] handle; parents always precede children, so the
//! backward pass is a single reverse sweep.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use thiserror::Error;

use super::Matrix;
use crate::graph::NormalizedAdjacency;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("log of non-positive value {value}")]
    LogOfNonPositive { value: f64 },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NotAScalar { rows: usize, cols: usize },
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    SpMM(Arc<NormalizedAdjacency>, Tensor),
    Relu(Tensor),
    RowL2Normalize(Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    MulConst(Tensor, Matrix),
    Scale(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Sum(Tensor),
    RowSum(Tensor),
    Mean(Tensor),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&Matrix> {
        self.grads.get(t.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, t: Tensor) -> Option<Matrix> {
        self.grads.get_mut(t.0).and_then(Option::take)
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            left: shape(a),
            right: shape(b),
        })
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.dim()
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value[[0, 0]]
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op) -> Result<Tensor> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            Op::SpMM(_, a)
            | Op::Relu(a)
            | Op::RowL2Normalize(a)
            | Op::Transpose(a)
            | Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Neg(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::Mean(a) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: shape(va),
                right: shape(vb),
            });
        }
        let out = va.dot(vb);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// Sparse normalized adjacency times a dense matrix.
    pub fn spmm(&mut self, adj: &Arc<NormalizedAdjacency>, x: Tensor) -> Result<Tensor> {
        let vx = self.value(x);
        if vx.nrows() != adj.dim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "spmm",
                left: (adj.dim(), adj.dim()),
                right: shape(vx),
            });
        }
        let out = adj.matmul(vx);
        self.push("spmm", out, Op::SpMM(Arc::clone(adj), x))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a))
    }

    /// Scales every row to unit Euclidean norm. All-zero rows stay zero.
    pub fn row_l2_normalize(&mut self, a: Tensor) -> Result<Tensor> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        self.push("row_l2_normalize", out, Op::RowL2Normalize(a))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).t().to_owned();
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Elementwise product with a constant matrix (masks, selectors).
    pub fn mul_const(&mut self, a: Tensor, c: Matrix) -> Result<Tensor> {
        same_shape("mul_const", self.value(a), &c)?;
        let out = self.value(a) * &c;
        self.push("mul_const", out, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Result<Tensor> {
        let out = self.value(a) * s;
        self.push("scale", out, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).mapv(f64::exp);
        self.push("exp", out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        if let Some(&v) = self.value(a).iter().find(|&&v| v <= 0.0) {
            return Err(AutodiffError::LogOfNonPositive { value: v });
        }
        let out = self.value(a).mapv(f64::ln);
        self.push("log", out, Op::Log(a))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("div", self.value(a), self.value(b))?;
        let out = self.value(a) / self.value(b);
        self.push("div", out, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Tensor) -> Result<Tensor> {
        let out = -self.value(a);
        self.push("neg", out, Op::Neg(a))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    /// Per-row sums as an `n x 1` column.
    pub fn row_sum(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push("row_sum", out, Op::RowSum(a))
    }

    /// Mean of all entries as a 1x1 tensor.
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a);
        let n = v.len().max(1) as f64;
        let out = Array2::from_elem((1, 1), v.sum() / n);
        self.push("mean", out, Op::Mean(a))
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// Gradients are produced for every node that depends on a parameter;
    /// constants and their descendants that do not are skipped.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NotAScalar { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.dot(&vb.t()));
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, va.t().dot(&g));
                    }
                }
                Op::SpMM(adj, a) => accumulate(&mut grads, *a, adj.transpose_matmul(&g)),
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    accumulate(&mut grads, *a, d);
                }
                Op::RowL2Normalize(a) => {
                    let x = self.value(*a);
                    let mut d = Array2::zeros(x.dim());
                    for (i, mut drow) in d.rows_mut().into_iter().enumerate() {
                        let xr = x.row(i);
                        let norm = xr.dot(&xr).sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (y.row(i), g.row(i));
                        let proj = yr.dot(&gr);
                        Zip::from(&mut drow)
                            .and(&gr)
                            .and(&yr)
                            .for_each(|d, &g, &y| *d = (g - y * proj) / norm);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate_if(self, &mut grads, *a, || g.clone());
                    accumulate_if(self, &mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate_if(self, &mut grads, *a, || g.clone());
                    accumulate_if(self, &mut grads, *b, || -&g);
                }
                Op::Mul(a, b) => {
                    accumulate_if(self, &mut grads, *a, || &g * self.value(*b));
                    accumulate_if(self, &mut grads, *b, || &g * self.value(*a));
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c),
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::Exp(a) => accumulate(&mut grads, *a, &g * y),
                Op::Log(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate_if(self, &mut grads, *a, || &g / vb);
                    accumulate_if(self, &mut grads, *b, || {
                        let mut d = -&g * va;
                        Zip::from(&mut d).and(vb).for_each(|d, &b| *d /= b * b);
                        d
                    });
                }
                Op::Neg(a) => accumulate(&mut grads, *a, -&g),
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, d);
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(*a);
                    let d = g
                        .broadcast((r, c))
                        .expect("row_sum gradient is a column")
                        .to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1).max(1) as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], t: Tensor, d: Matrix) {
    match &mut grads[t.0] {
        Some(acc) => *acc += &d,
        slot @ None => *slot = Some(d),
    }
}

fn accumulate_if(tape: &Tape, grads: &mut [Option<Matrix>], t: Tensor, d: impl FnOnce() -> Matrix) {
    if tape.nodes[t.0].requires_grad {
        accumulate(grads, t, d());
    }
}
