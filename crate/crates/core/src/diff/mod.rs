//! Reverse-mode differentiation over a recorded sequence of matrix operations.
//!
//! A [`Tape`] records every operation as it is evaluated. Gradients are
//! obtained by a reverse sweep over the record. The sweep can run in two
//! modes:
//!
//! * plain ([`Tape::gradient`]): adjoints are ordinary matrices;
//! * recorded ([`Tape::gradient_recorded`]): adjoints are themselves new nodes
//!   on the same tape, so the result can be differentiated again.
//!
//! The recorded mode is what makes the meta-gradient possible: the inner SGD
//! step `phi1 = phi0 - lr * grad(L_inner)` is built from recorded adjoints and
//! a second, plain sweep then carries the outer gradient back to the
//! synthetic data.
//!
//! Both modes share one set of vector-Jacobian rules (see `backward.rs`), so
//! first- and second-order results can never drift apart.

mod backward;

use crate::matrix::Matrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },
    #[error("node {node} is not a leaf of this record")]
    NotALeaf { node: usize },
    #[error("node {node} does not belong to this record")]
    UnknownNode { node: usize },
    #[error("gradient requested of non-scalar node {node} with shape {rows}x{cols}")]
    NotScalar { node: usize, rows: usize, cols: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("expected {expected} vectors, found {found}")]
    CountMismatch { expected: usize, found: usize },
}

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Square(usize),
    Min(usize, usize),
    Max(usize, usize),
    Clip(usize, f64, f64),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    Broadcast(usize, usize, usize),
    BroadcastRows(usize, usize),
    BroadcastCols(usize, usize),
}

impl Op {
    fn parents(self) -> [Option<usize>; 2] {
        use Op::*;
        match self {
            Leaf | Const => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Min(a, b) | Max(a, b)
            | MatMul(a, b) | AddRow(a, b) => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | Exp(a) | Log(a) | Tanh(a) | Square(a) | Clip(a, _, _)
            | Transpose(a) | Sum(a) | Mean(a) | SumRows(a) | SumCols(a) | Broadcast(a, _, _)
            | BroadcastRows(a, _) | BroadcastCols(a, _) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Gradient of a scalar with respect to a set of leaves.
///
/// Every requested leaf has an entry; leaves the output does not depend on
/// get an all-zero matrix of the leaf's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    entries: Vec<(Var, Matrix)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.entries.iter().find(|(k, _)| *k == v).map(|(_, m)| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Matrix)> {
        self.entries.iter().map(|(k, m)| (*k, m))
    }

    pub fn into_matrices(self) -> Vec<Matrix> {
        self.entries.into_iter().map(|(_, m)| m).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl std::ops::Index<Var> for Gradients {
    type Output = Matrix;

    fn index(&self, v: Var) -> &Matrix {
        self.get(v).expect("variable was not requested in this gradient")
    }
}

/// Append-only computation record.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_raw(Op::Const, value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.op == Op::Leaf)
    }

    /// First node whose value contained NaN or an infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite
    }

    pub fn ensure_finite(&self) -> Result<(), DiffError> {
        match self.first_non_finite {
            Some(node) => Err(DiffError::NonFinite { node }),
            None => Ok(()),
        }
    }

    fn push_raw(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(id)
    }

    fn push(&mut self, op: Op) -> Var {
        let value = eval_op(op, &self.nodes);
        let requires_grad = op
            .parents()
            .iter()
            .flatten()
            .any(|&p| self.nodes[p].requires_grad);
        self.push_raw(op, value, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a.0, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a.0))
    }

    /// Elementwise minimum; ties select `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Min(a.0, b.0))
    }

    /// Elementwise maximum; ties select `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Max(a.0, b.0))
    }

    /// Clamp into `[lo, hi]`. The gradient passes only where `lo < x < hi`;
    /// a value sitting exactly on a bound takes the bound branch.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clip bounds out of order");
        self.push(Op::Clip(a.0, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a.0))
    }

    /// `a + row` with the `1 x c` row repeated over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.push(Op::AddRow(a.0, row.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a.0))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.push(Op::SumRows(a.0))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.push(Op::SumCols(a.0))
    }

    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        self.push(Op::Broadcast(a.0, rows, cols))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        self.push(Op::BroadcastRows(a.0, rows))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        self.push(Op::BroadcastCols(a.0, cols))
    }

    /// Row-wise log-softmax. The row maximum enters as a constant shift, which
    /// leaves both the value and the gradient unchanged mathematically.
    pub fn log_softmax(&mut self, logits: Var) -> Var {
        let cols = self.shape(logits).1;
        let shift = self.value(logits).max_cols().broadcast_cols(cols);
        let shift = self.constant(shift);
        let shifted = self.sub(logits, shift);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let lse = self.log(s);
        let lse = self.broadcast_cols(lse, cols);
        self.sub(shifted, lse)
    }

    /// Picks one column per row: `out[i] = a[i, cols[i]]`, shape `rows x 1`.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(cols.len(), r, "one column index per row");
        let mut mask = Matrix::zeros(r, c);
        for (i, &j) in cols.iter().enumerate() {
            mask[(i, j)] = 1.0;
        }
        let mask = self.constant(mask);
        let picked = self.mul(a, mask);
        self.sum_cols(picked)
    }

    /// Re-evaluates every node from the recorded leaves and constants.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut replayed: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let value = match n.op {
                Op::Leaf | Op::Const => n.value.clone(),
                op => eval_op(op, &replayed),
            };
            replayed.push(Node {
                op: n.op,
                value,
                requires_grad: n.requires_grad,
            });
        }
        replayed.into_iter().map(|n| n.value).collect()
    }

    fn check_output(&self, output: Var) -> Result<(), DiffError> {
        let node = self
            .nodes
            .get(output.0)
            .ok_or(DiffError::UnknownNode { node: output.0 })?;
        let (rows, cols) = node.value.shape();
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NotScalar {
                node: output.0,
                rows,
                cols,
            });
        }
        Ok(())
    }

    fn check_known(&self, wrt: &[Var]) -> Result<(), DiffError> {
        match wrt.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(DiffError::UnknownNode { node: v.0 }),
            None => Ok(()),
        }
    }

    fn check_leaves(&self, wrt: &[Var]) -> Result<(), DiffError> {
        for &v in wrt {
            if v.0 >= self.nodes.len() {
                return Err(DiffError::UnknownNode { node: v.0 });
            }
            if !self.is_leaf(v) {
                return Err(DiffError::NotALeaf { node: v.0 });
            }
        }
        Ok(())
    }

    /// `d output / d p` for every leaf `p` in `wrt`.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Gradients, DiffError> {
        self.check_output(output)?;
        self.check_leaves(wrt)?;
        self.ensure_finite()?;
        let grads = backward::sweep(&mut backward::Plain { tape: self }, output.0, wrt);
        let entries = wrt
            .iter()
            .zip(grads)
            .map(|(&v, g)| (v, g.unwrap_or_else(|| Matrix::zeros(self.shape(v).0, self.shape(v).1))))
            .collect();
        Ok(Gradients { entries })
    }

    /// Like [`Tape::gradient`], but the adjoints are recorded as new nodes so
    /// they can be differentiated again.
    ///
    /// `wrt` may also name interior nodes. Each is then treated as an
    /// independent input: the result is the partial derivative with respect to
    /// that node and propagation stops there.
    pub fn gradient_recorded(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, DiffError> {
        self.check_output(output)?;
        self.check_known(wrt)?;
        self.ensure_finite()?;
        let grads = backward::sweep(&mut backward::Recorded { tape: self }, output.0, wrt);
        let out = wrt
            .iter()
            .zip(grads)
            .map(|(&v, g)| match g {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(v);
                    self.constant(Matrix::zeros(r, c))
                }
            })
            .collect();
        self.ensure_finite()?;
        Ok(out)
    }

    /// Records `s = sum_p <v_p, x_p>` with every `v_p` held constant.
    pub fn dot_constant(&mut self, xs: &[Var], vs: &[Matrix]) -> Result<Var, DiffError> {
        if xs.len() != vs.len() {
            return Err(DiffError::CountMismatch {
                expected: xs.len(),
                found: vs.len(),
            });
        }
        let mut total = self.constant(Matrix::scalar(0.0));
        for (&x, v) in xs.iter().zip(vs) {
            if self.shape(x) != v.shape() {
                return Err(DiffError::ShapeMismatch {
                    expected: self.shape(x),
                    found: v.shape(),
                });
            }
            let c = self.constant(v.clone());
            let prod = self.mul(x, c);
            let s = self.sum(prod);
            total = self.add(total, s);
        }
        Ok(total)
    }

    /// `d/dp ( grad_{inner_params} inner_loss · v )` for every `p` in `wrt`.
    ///
    /// `v` is a constant. `wrt` may include leaves that `inner_loss` depends on
    /// only through its gradient (synthetic data, labels, learning rate).
    pub fn grad_of_grad_dot(
        &mut self,
        inner_loss: Var,
        inner_params: &[Var],
        v: &[Matrix],
        wrt: &[Var],
    ) -> Result<Gradients, DiffError> {
        if inner_params.len() != v.len() {
            return Err(DiffError::CountMismatch {
                expected: inner_params.len(),
                found: v.len(),
            });
        }
        self.check_leaves(wrt)?;
        let g = self.gradient_recorded(inner_loss, inner_params)?;
        let s = self.dot_constant(&g, v)?;
        self.gradient(s, wrt)
    }
}

/// Records `f` on a fresh tape with one leaf per input.
///
/// Returns the tape, the leaf handles and the output. Fails with
/// [`DiffError::NonFinite`] if any recorded value is not finite.
pub fn record<F>(inputs: &[Matrix], f: F) -> Result<(Tape, Vec<Var>, Var), DiffError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &leaves);
    tape.ensure_finite()?;
    Ok((tape, leaves, out))
}

fn eval_op(op: Op, nodes: &[Node]) -> Matrix {
    use Op::*;
    let v = |i: usize| &nodes[i].value;
    match op {
        Leaf | Const => unreachable!("inputs are not evaluated"),
        Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
        Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
        Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
        Div(a, b) => v(a).zip_map(v(b), |x, y| x / y),
        Neg(a) => v(a).map(|x| -x),
        Scale(a, c) => v(a).map(|x| x * c),
        Exp(a) => v(a).map(f64::exp),
        Log(a) => v(a).map(f64::ln),
        Tanh(a) => v(a).map(f64::tanh),
        Square(a) => v(a).map(|x| x * x),
        Min(a, b) => v(a).zip_map(v(b), |x, y| if x <= y { x } else { y }),
        Max(a, b) => v(a).zip_map(v(b), |x, y| if x >= y { x } else { y }),
        Clip(a, lo, hi) => v(a).map(|x| clip_value(x, lo, hi)),
        MatMul(a, b) => v(a).matmul(v(b)),
        Transpose(a) => v(a).transpose(),
        AddRow(a, b) => v(a).add_row(v(b)),
        Sum(a) => Matrix::scalar(v(a).sum()),
        Mean(a) => Matrix::scalar(v(a).sum() / v(a).len() as f64),
        SumRows(a) => v(a).sum_rows(),
        SumCols(a) => v(a).sum_cols(),
        Broadcast(a, r, c) => v(a).broadcast(r, c),
        BroadcastRows(a, r) => v(a).broadcast_rows(r),
        BroadcastCols(a, c) => v(a).broadcast_cols(c),
    }
}

#[inline]
pub(crate) fn clip_value(x: f64, lo: f64, hi: f64) -> f64 {
    if x <= lo {
        lo
    } else if x >= hi {
        hi
    } else {
        x
    }
}

#[cfg(test)]
mod tests;
