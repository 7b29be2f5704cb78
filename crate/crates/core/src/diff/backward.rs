//! Vector-Jacobian rules shared by the plain and the recorded reverse sweep.

use super::{Node, Op, Tape, Var};
use crate::matrix::Matrix;

/// Arithmetic on adjoints. `Plain` works on matrices, `Recorded` appends nodes.
pub(super) trait Adjoint {
    type G;

    fn nodes(&self) -> &[Node];
    fn seed(&mut self, node: usize) -> Self::G;
    fn add(&mut self, a: Self::G, b: Self::G) -> Self::G;
    fn neg(&mut self, g: Self::G) -> Self::G;
    fn scale(&mut self, g: Self::G, c: f64) -> Self::G;
    /// `g ⊙ value(node)`
    fn mul_node(&mut self, g: Self::G, node: usize) -> Self::G;
    /// `g ⊘ value(node)`
    fn div_node(&mut self, g: Self::G, node: usize) -> Self::G;
    /// `g ⊙ mask` with a constant mask.
    fn mask(&mut self, g: Self::G, mask: Matrix) -> Self::G;
    /// `g ⊙ (1 - value(node)²)`
    fn tanh_grad(&mut self, g: Self::G, node: usize) -> Self::G;
    /// `g · value(node)ᵀ`
    fn matmul_node_t(&mut self, g: Self::G, node: usize) -> Self::G;
    /// `value(node)ᵀ · g`
    fn node_t_matmul(&mut self, node: usize, g: Self::G) -> Self::G;
    fn transpose(&mut self, g: Self::G) -> Self::G;
    fn sum(&mut self, g: Self::G) -> Self::G;
    fn sum_rows(&mut self, g: Self::G) -> Self::G;
    fn sum_cols(&mut self, g: Self::G) -> Self::G;
    fn broadcast(&mut self, g: Self::G, rows: usize, cols: usize) -> Self::G;
    fn broadcast_rows(&mut self, g: Self::G, rows: usize) -> Self::G;
    fn broadcast_cols(&mut self, g: Self::G, cols: usize) -> Self::G;
    fn dup(&mut self, g: &Self::G) -> Self::G;
}

pub(super) struct Plain<'t> {
    pub tape: &'t Tape,
}

impl Adjoint for Plain<'_> {
    type G = Matrix;

    fn nodes(&self) -> &[Node] {
        &self.tape.nodes
    }

    fn seed(&mut self, node: usize) -> Matrix {
        let (r, c) = self.tape.nodes[node].value.shape();
        Matrix::filled(r, c, 1.0)
    }

    fn add(&mut self, a: Matrix, b: Matrix) -> Matrix {
        a.zip_map(&b, |x, y| x + y)
    }

    fn neg(&mut self, g: Matrix) -> Matrix {
        g.map(|x| -x)
    }

    fn scale(&mut self, g: Matrix, c: f64) -> Matrix {
        g.map(|x| x * c)
    }

    fn mul_node(&mut self, g: Matrix, node: usize) -> Matrix {
        g.zip_map(&self.tape.nodes[node].value, |x, y| x * y)
    }

    fn div_node(&mut self, g: Matrix, node: usize) -> Matrix {
        g.zip_map(&self.tape.nodes[node].value, |x, y| x / y)
    }

    fn mask(&mut self, g: Matrix, mask: Matrix) -> Matrix {
        g.zip_map(&mask, |x, y| x * y)
    }

    fn tanh_grad(&mut self, g: Matrix, node: usize) -> Matrix {
        g.zip_map(&self.tape.nodes[node].value, |x, y| x * (1.0 - y * y))
    }

    fn matmul_node_t(&mut self, g: Matrix, node: usize) -> Matrix {
        g.matmul(&self.tape.nodes[node].value.transpose())
    }

    fn node_t_matmul(&mut self, node: usize, g: Matrix) -> Matrix {
        self.tape.nodes[node].value.transpose().matmul(&g)
    }

    fn transpose(&mut self, g: Matrix) -> Matrix {
        g.transpose()
    }

    fn sum(&mut self, g: Matrix) -> Matrix {
        Matrix::scalar(g.sum())
    }

    fn sum_rows(&mut self, g: Matrix) -> Matrix {
        g.sum_rows()
    }

    fn sum_cols(&mut self, g: Matrix) -> Matrix {
        g.sum_cols()
    }

    fn broadcast(&mut self, g: Matrix, rows: usize, cols: usize) -> Matrix {
        g.broadcast(rows, cols)
    }

    fn broadcast_rows(&mut self, g: Matrix, rows: usize) -> Matrix {
        g.broadcast_rows(rows)
    }

    fn broadcast_cols(&mut self, g: Matrix, cols: usize) -> Matrix {
        g.broadcast_cols(cols)
    }

    fn dup(&mut self, g: &Matrix) -> Matrix {
        g.clone()
    }
}

pub(super) struct Recorded<'t> {
    pub tape: &'t mut Tape,
}

impl Recorded<'_> {
    fn node(&self, i: usize) -> Var {
        Var(i)
    }
}

impl Adjoint for Recorded<'_> {
    type G = Var;

    fn nodes(&self) -> &[Node] {
        &self.tape.nodes
    }

    fn seed(&mut self, node: usize) -> Var {
        let (r, c) = self.tape.nodes[node].value.shape();
        self.tape.constant(Matrix::filled(r, c, 1.0))
    }

    fn add(&mut self, a: Var, b: Var) -> Var {
        self.tape.add(a, b)
    }

    fn neg(&mut self, g: Var) -> Var {
        self.tape.neg(g)
    }

    fn scale(&mut self, g: Var, c: f64) -> Var {
        self.tape.scale(g, c)
    }

    fn mul_node(&mut self, g: Var, node: usize) -> Var {
        let n = self.node(node);
        self.tape.mul(g, n)
    }

    fn div_node(&mut self, g: Var, node: usize) -> Var {
        let n = self.node(node);
        self.tape.div(g, n)
    }

    fn mask(&mut self, g: Var, mask: Matrix) -> Var {
        let m = self.tape.constant(mask);
        self.tape.mul(g, m)
    }

    fn tanh_grad(&mut self, g: Var, node: usize) -> Var {
        let y = self.node(node);
        let (r, c) = self.tape.shape(y);
        let one = self.tape.constant(Matrix::filled(r, c, 1.0));
        let y2 = self.tape.square(y);
        let d = self.tape.sub(one, y2);
        self.tape.mul(g, d)
    }

    fn matmul_node_t(&mut self, g: Var, node: usize) -> Var {
        let n = self.node(node);
        let nt = self.tape.transpose(n);
        self.tape.matmul(g, nt)
    }

    fn node_t_matmul(&mut self, node: usize, g: Var) -> Var {
        let n = self.node(node);
        let nt = self.tape.transpose(n);
        self.tape.matmul(nt, g)
    }

    fn transpose(&mut self, g: Var) -> Var {
        self.tape.transpose(g)
    }

    fn sum(&mut self, g: Var) -> Var {
        self.tape.sum(g)
    }

    fn sum_rows(&mut self, g: Var) -> Var {
        self.tape.sum_rows(g)
    }

    fn sum_cols(&mut self, g: Var) -> Var {
        self.tape.sum_cols(g)
    }

    fn broadcast(&mut self, g: Var, rows: usize, cols: usize) -> Var {
        self.tape.broadcast(g, rows, cols)
    }

    fn broadcast_rows(&mut self, g: Var, rows: usize) -> Var {
        self.tape.broadcast_rows(g, rows)
    }

    fn broadcast_cols(&mut self, g: Var, cols: usize) -> Var {
        self.tape.broadcast_cols(g, cols)
    }

    fn dup(&mut self, g: &Var) -> Var {
        *g
    }
}

fn accumulate<A: Adjoint>(ctx: &mut A, adj: &mut [Option<A::G>], p: usize, g: A::G) {
    adj[p] = Some(match adj[p].take() {
        Some(prev) => ctx.add(prev, g),
        None => g,
    });
}

/// Reverse sweep from `output`; returns one adjoint per `wrt` entry (`None`
/// where the output does not depend on it).
pub(super) fn sweep<A: Adjoint>(ctx: &mut A, output: usize, wrt: &[Var]) -> Vec<Option<A::G>> {
    let mut adj: Vec<Option<A::G>> = (0..=output).map(|_| None).collect();
    let mut results: Vec<Option<A::G>> = wrt.iter().map(|_| None).collect();
    if ctx.nodes()[output].requires_grad {
        adj[output] = Some(ctx.seed(output));
    }

    for i in (0..=output).rev() {
        let Some(g) = adj[i].take() else { continue };
        let op = ctx.nodes()[i].op;
        let mut hit = false;
        for (slot, w) in results.iter_mut().zip(wrt) {
            if w.0 == i {
                *slot = Some(ctx.dup(&g));
                hit = true;
            }
        }
        // an interior node in `wrt` is treated as an independent input
        if hit && !matches!(op, Op::Leaf) {
            continue;
        }
        let needs = |ctx: &A, p: usize| ctx.nodes()[p].requires_grad;
        use Op::*;
        match op {
            Leaf => {}
            Const => {}
            Add(a, b) => {
                if needs(ctx, a) {
                    let ga = ctx.dup(&g);
                    accumulate(ctx, &mut adj, a, ga);
                }
                if needs(ctx, b) {
                    accumulate(ctx, &mut adj, b, g);
                }
            }
            Sub(a, b) => {
                if needs(ctx, a) {
                    let ga = ctx.dup(&g);
                    accumulate(ctx, &mut adj, a, ga);
                }
                if needs(ctx, b) {
                    let gb = ctx.neg(g);
                    accumulate(ctx, &mut adj, b, gb);
                }
            }
            Mul(a, b) => {
                if needs(ctx, a) {
                    let ga = ctx.dup(&g);
                    let ga = ctx.mul_node(ga, b);
                    accumulate(ctx, &mut adj, a, ga);
                }
                if needs(ctx, b) {
                    let gb = ctx.mul_node(g, a);
                    accumulate(ctx, &mut adj, b, gb);
                }
            }
            Div(a, b) => {
                if needs(ctx, a) {
                    let ga = ctx.dup(&g);
                    let ga = ctx.div_node(ga, b);
                    accumulate(ctx, &mut adj, a, ga);
                }
                if needs(ctx, b) {
                    // -g * a / b²
                    let gb = ctx.div_node(g, b);
                    let gb = ctx.div_node(gb, b);
                    let gb = ctx.mul_node(gb, a);
                    let gb = ctx.neg(gb);
                    accumulate(ctx, &mut adj, b, gb);
                }
            }
            Neg(a) => {
                let ga = ctx.neg(g);
                accumulate(ctx, &mut adj, a, ga);
            }
            Scale(a, c) => {
                let ga = ctx.scale(g, c);
                accumulate(ctx, &mut adj, a, ga);
            }
            Exp(a) => {
                let ga = ctx.mul_node(g, i);
                accumulate(ctx, &mut adj, a, ga);
            }
            Log(a) => {
                let ga = ctx.div_node(g, a);
                accumulate(ctx, &mut adj, a, ga);
            }
            Tanh(a) => {
                let ga = ctx.tanh_grad(g, i);
                accumulate(ctx, &mut adj, a, ga);
            }
            Square(a) => {
                let ga = ctx.mul_node(g, a);
                let ga = ctx.scale(ga, 2.0);
                accumulate(ctx, &mut adj, a, ga);
            }
            Min(a, b) | Max(a, b) => {
                let va = &ctx.nodes()[a].value;
                let vb = &ctx.nodes()[b].value;
                let pick_a = if matches!(op, Min(..)) {
                    va.zip_map(vb, |x, y| if x <= y { 1.0 } else { 0.0 })
                } else {
                    va.zip_map(vb, |x, y| if x >= y { 1.0 } else { 0.0 })
                };
                let pick_b = pick_a.map(|m| 1.0 - m);
                if needs(ctx, a) {
                    let ga = ctx.dup(&g);
                    let ga = ctx.mask(ga, pick_a);
                    accumulate(ctx, &mut adj, a, ga);
                }
                if needs(ctx, b) {
                    let gb = ctx.mask(g, pick_b);
                    accumulate(ctx, &mut adj, b, gb);
                }
            }
            Clip(a, lo, hi) => {
                let pass = ctx.nodes()[a]
                    .value
                    .map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                let ga = ctx.mask(g, pass);
                accumulate(ctx, &mut adj, a, ga);
            }
            MatMul(a, b) => {
                if needs(ctx, a) {
                    let ga = ctx.dup(&g);
                    let ga = ctx.matmul_node_t(ga, b);
                    accumulate(ctx, &mut adj, a, ga);
                }
                if needs(ctx, b) {
                    let gb = ctx.node_t_matmul(a, g);
                    accumulate(ctx, &mut adj, b, gb);
                }
            }
            Transpose(a) => {
                let ga = ctx.transpose(g);
                accumulate(ctx, &mut adj, a, ga);
            }
            AddRow(a, b) => {
                if needs(ctx, a) {
                    let ga = ctx.dup(&g);
                    accumulate(ctx, &mut adj, a, ga);
                }
                if needs(ctx, b) {
                    let gb = ctx.sum_rows(g);
                    accumulate(ctx, &mut adj, b, gb);
                }
            }
            Sum(a) | Mean(a) => {
                let (r, c) = ctx.nodes()[a].value.shape();
                let g = if matches!(op, Mean(_)) {
                    ctx.scale(g, 1.0 / (r * c) as f64)
                } else {
                    g
                };
                let ga = ctx.broadcast(g, r, c);
                accumulate(ctx, &mut adj, a, ga);
            }
            SumRows(a) => {
                let r = ctx.nodes()[a].value.rows();
                let ga = ctx.broadcast_rows(g, r);
                accumulate(ctx, &mut adj, a, ga);
            }
            SumCols(a) => {
                let c = ctx.nodes()[a].value.cols();
                let ga = ctx.broadcast_cols(g, c);
                accumulate(ctx, &mut adj, a, ga);
            }
            Broadcast(a, _, _) => {
                let ga = ctx.sum(g);
                accumulate(ctx, &mut adj, a, ga);
            }
            BroadcastRows(a, _) => {
                let ga = ctx.sum_rows(g);
                accumulate(ctx, &mut adj, a, ga);
            }
            BroadcastCols(a, _) => {
                let ga = ctx.sum_cols(g);
                accumulate(ctx, &mut adj, a, ga);
            }
        }
    }
    results
}
