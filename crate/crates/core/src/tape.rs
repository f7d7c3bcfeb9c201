//! Reverse-mode differentiation over batched matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Tape::backward`] walks the record in reverse and
//! returns the gradient of a scalar (`1 × 1`) node with respect to every node
//! that was created with [`Tape::variable`] or depends on one.
//!
//! Tapes are built per batch and dropped afterwards; there is no global graph.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::math;
use crate::matrix::{gemm, Mat};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a · b`
    MatMul(usize, usize),
    /// `a + row` with `row` broadcast over the rows of `a`.
    AddRow(usize, usize),
    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    MulRow(usize, usize),
    /// Elementwise product.
    Mul(usize, usize),
    /// `Σ cᵢ · aᵢ` over equally shaped nodes.
    LinComb(Vec<(usize, f64)>),
    /// `max(z,0) + ln(1 + e^{-β|z|})/β`
    Softplus(usize, f64),
    /// `1 / (1 + e^{-βz})`, the derivative of `Softplus(β)`.
    Sigmoid(usize, f64),
    /// Softplus of `z` evaluated from its already recorded slope node
    /// `s = Sigmoid(z, β)`; gradients flow to `z` only.
    SoftplusWithSlope { z: usize, s: usize, beta: f64 },
    Square(usize),
    /// `m × n → m × 1`
    RowSum(usize),
    /// Mean of all entries, `→ 1 × 1`.
    Mean(usize),
    ConcatCols(usize, usize),
    SelectCol(usize, usize),
    /// Contiguous range of the row-major storage of `a`, reshaped to `rows × cols`.
    Slice {
        src: usize,
        offset: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation trace.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` when the output does
    /// not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        self.grads[v.index].as_ref()
    }
}

#[inline]
pub fn softplus(z: f64, beta: f64) -> f64 {
    let a = beta * z;
    let tail = if a.abs() > 40.0 {
        // ln(1 + e^{-40}) / β is below 1e-18
        0.0
    } else {
        math::ln_1p(math::exp(-a.abs())) / beta
    };
    z.max(0.0) + tail
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + math::exp(-a))
    } else {
        let e = math::exp(a);
        e / (1.0 + e)
    }
}

/// `softplus(z, β)` from `s = σ(βz)`: `z − ln(s)/β` for `z ≥ 0`, `−ln(1 − s)/β` otherwise.
#[inline]
fn softplus_from_slope(z: f64, s: f64, beta: f64) -> f64 {
    if z >= 0.0 {
        z - math::ln(s) / beta
    } else {
        -math::ln_1p(-s) / beta
    }
}

/// Column sums of `m`, as a `1 × n` matrix.
fn col_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols());
    let acc = out.as_mut_slice();
    for r in m.iter_rows() {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    out
}

fn eval(op: &Op, nodes: &[Node]) -> Mat {
    let v = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => v(*a).matmul(v(*b)),
        Op::AddRow(a, row) => {
            let mut out = v(*a).clone();
            let row = v(*row).as_slice();
            let cols = out.cols();
            for r in out.as_mut_slice().chunks_exact_mut(cols.max(1)) {
                for (x, b) in r.iter_mut().zip(row) {
                    *x += b;
                }
            }
            out
        }
        Op::MulRow(a, row) => {
            let mut out = v(*a).clone();
            let row = v(*row).as_slice();
            let cols = out.cols();
            for r in out.as_mut_slice().chunks_exact_mut(cols.max(1)) {
                for (x, b) in r.iter_mut().zip(row) {
                    *x *= b;
                }
            }
            out
        }
        Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
        Op::LinComb(terms) => {
            let (first, c0) = terms[0];
            let mut out = v(first).map(|x| c0 * x);
            for &(i, c) in &terms[1..] {
                out.axpy(c, v(i));
            }
            out
        }
        Op::Softplus(a, beta) => v(*a).map(|z| softplus(z, *beta)),
        Op::Sigmoid(a, beta) => v(*a).map(|z| sigmoid(beta * z)),
        Op::SoftplusWithSlope { z, s, beta } => v(*z).zip_map(v(*s), |z, s| softplus_from_slope(z, s, *beta)),
        Op::Square(a) => v(*a).map(|x| x * x),
        Op::RowSum(a) => {
            let m = v(*a);
            let sums: Vec<f64> = m.iter_rows().map(|r| r.iter().sum()).collect();
            Mat::column(&sums)
        }
        Op::Mean(a) => {
            let m = v(*a);
            let n = (m.rows() * m.cols()).max(1) as f64;
            Mat::filled(1, 1, m.sum() / n)
        }
        Op::ConcatCols(a, b) => {
            let (a, b) = (v(*a), v(*b));
            let mut out = Mat::zeros(a.rows(), a.cols() + b.cols());
            for r in 0..a.rows() {
                let row = out.row_mut(r);
                row[..a.cols()].copy_from_slice(a.row(r));
                row[a.cols()..].copy_from_slice(b.row(r));
            }
            out
        }
        Op::SelectCol(a, j) => {
            let m = v(*a);
            let col: Vec<f64> = m.iter_rows().map(|r| r[*j]).collect();
            Mat::column(&col)
        }
        Op::Slice {
            src,
            offset,
            rows,
            cols,
        } => {
            let data = v(*src).as_slice()[*offset..*offset + rows * cols].to_vec();
            Mat::from_vec(*rows, *cols, data).expect("slice extent checked at construction")
        }
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::Mul(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::LinComb(t) => t.iter().map(|&(i, _)| i).collect(),
        Op::Softplus(a, _)
        | Op::Sigmoid(a, _)
        | Op::Square(a)
        | Op::RowSum(a)
        | Op::Mean(a)
        | Op::SelectCol(a, _)
        | Op::Slice { src: a, .. }
        | Op::SoftplusWithSlope { z: a, .. } => vec![*a],
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    fn check(&self, v: Var) -> usize {
        assert_eq!(
            v.tape, self.id,
            "variable was recorded on a different tape and cannot enter this trace"
        );
        v.index
    }

    fn push_leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, op: Op) -> Var {
        let value = eval(&op, &self.nodes);
        let requires_grad = parents(&op).iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A leaf that gradients are not propagated into.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf that gradients are computed for.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[self.check(v)].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v)].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        assert_eq!(
            self.nodes[ia].value.cols(),
            self.nodes[ib].value.rows(),
            "matmul inner dimension mismatch"
        );
        self.push(Op::MatMul(ia, ib))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.check(a), self.check(row));
        assert_eq!(self.nodes[ir].value.shape(), (1, self.nodes[ia].value.cols()));
        self.push(Op::AddRow(ia, ir))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.check(a), self.check(row));
        assert_eq!(self.nodes[ir].value.shape(), (1, self.nodes[ia].value.cols()));
        self.push(Op::MulRow(ia, ir))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        assert_eq!(self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        self.push(Op::Mul(ia, ib))
    }

    /// `Σ cᵢ · vᵢ`
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "empty linear combination");
        let shape = self.value(terms[0].0).shape();
        let mut t = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            let i = self.check(v);
            assert_eq!(self.nodes[i].value.shape(), shape, "lin_comb shape mismatch");
            t.push((i, c));
        }
        self.push(Op::LinComb(t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.lin_comb(&[(a, 1.0), (b, -1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.lin_comb(&[(a, c)])
    }

    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        let i = self.check(a);
        self.push(Op::Softplus(i, beta))
    }

    pub fn sigmoid(&mut self, a: Var, beta: f64) -> Var {
        let i = self.check(a);
        self.push(Op::Sigmoid(i, beta))
    }

    /// `softplus(z, β)` given `s = sigmoid(z, β)` recorded from the same `z`.
    pub fn softplus_with_slope(&mut self, z: Var, s: Var, beta: f64) -> Var {
        let (iz, is) = (self.check(z), self.check(s));
        assert!(
            matches!(self.nodes[is].op, Op::Sigmoid(src, b) if src == iz && b == beta),
            "slope node must be sigmoid(z, beta) of the same input"
        );
        self.push(Op::SoftplusWithSlope { z: iz, s: is, beta })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let i = self.check(a);
        self.push(Op::Square(i))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let i = self.check(a);
        self.push(Op::RowSum(i))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let i = self.check(a);
        self.push(Op::Mean(i))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        assert_eq!(self.nodes[ia].value.rows(), self.nodes[ib].value.rows());
        self.push(Op::ConcatCols(ia, ib))
    }

    pub fn select_col(&mut self, a: Var, j: usize) -> Var {
        let i = self.check(a);
        assert!(j < self.nodes[i].value.cols(), "column out of range");
        self.push(Op::SelectCol(i, j))
    }

    /// `rows × cols` view of the storage of `a` starting at `offset`, copied.
    pub fn slice(&mut self, a: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let i = self.check(a);
        assert!(
            offset + rows * cols <= self.nodes[i].value.as_slice().len(),
            "slice out of range"
        );
        self.push(Op::Slice {
            src: i,
            offset,
            rows,
            cols,
        })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Vec<Mat> {
        let mut fresh: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let value = match n.op {
                Op::Leaf => n.value.clone(),
                ref op => eval(op, &fresh),
            };
            fresh.push(Node {
                value,
                op: n.op.clone(),
                requires_grad: n.requires_grad,
            });
        }
        fresh.into_iter().map(|n| n.value).collect()
    }

    /// Gradients of the scalar node `out` with respect to every node it depends on.
    pub fn backward(&self, out: Var) -> Gradients {
        let out = self.check(out);
        assert_eq!(
            self.nodes[out].value.shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out] = Some(Mat::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Mat>], i: usize, g: Mat) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |j: usize| &self.nodes[j].value;
            let wants = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        let mut ga = Mat::zeros(val(*a).rows(), val(*a).cols());
                        gemm(1.0, &g, false, val(*b), true, 0.0, &mut ga);
                        acc(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        let mut gb = Mat::zeros(val(*b).rows(), val(*b).cols());
                        gemm(1.0, val(*a), true, &g, false, 0.0, &mut gb);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        acc(&mut grads, *row, col_sums(&g));
                    }
                    if wants(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    if wants(*row) {
                        acc(&mut grads, *row, col_sums(&g.zip_map(val(*a), |x, y| x * y)));
                    }
                    if wants(*a) {
                        let r = val(*row).as_slice();
                        let mut ga = g;
                        let cols = ga.cols();
                        for chunk in ga.as_mut_slice().chunks_exact_mut(cols.max(1)) {
                            for (x, b) in chunk.iter_mut().zip(r) {
                                *x *= b;
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::LinComb(terms) => {
                    for &(j, c) in terms {
                        if wants(j) {
                            acc(&mut grads, j, g.map(|x| c * x));
                        }
                    }
                }
                Op::Softplus(a, beta) => {
                    let beta = *beta;
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(val(*a), |x, z| x * sigmoid(beta * z)),
                    );
                }
                Op::SoftplusWithSlope { z, s, .. } => {
                    acc(&mut grads, *z, g.zip_map(val(*s), |x, s| x * s));
                }
                Op::Sigmoid(a, beta) => {
                    let beta = *beta;
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(&node.value, |x, s| x * beta * s * (1.0 - s)),
                    );
                }
                Op::Square(a) => {
                    acc(&mut grads, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y));
                }
                Op::RowSum(a) => {
                    let m = val(*a);
                    let mut ga = Mat::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        let gr = g.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|v| *v = gr);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let m = val(*a);
                    let n = (m.rows() * m.cols()).max(1) as f64;
                    acc(&mut grads, *a, Mat::filled(m.rows(), m.cols(), g.get(0, 0) / n));
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (val(*a).cols(), val(*b).cols());
                    let rows = g.rows();
                    if wants(*a) {
                        let mut ga = Mat::zeros(rows, ca);
                        for r in 0..rows {
                            ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        }
                        acc(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        let mut gb = Mat::zeros(rows, cb);
                        for r in 0..rows {
                            gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::SelectCol(a, j) => {
                    let m = val(*a);
                    let mut ga = Mat::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        ga.set(r, *j, g.get(r, 0));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Slice { src, offset, .. } => {
                    let m = val(*src);
                    let n = g.as_slice().len();
                    match &mut grads[*src] {
                        Some(existing) => {
                            for (a, b) in existing.as_mut_slice()[*offset..*offset + n]
                                .iter_mut()
                                .zip(g.as_slice())
                            {
                                *a += b;
                            }
                        }
                        slot @ None => {
                            let mut ga = Mat::zeros(m.rows(), m.cols());
                            ga.as_mut_slice()[*offset..*offset + n].copy_from_slice(g.as_slice());
                            *slot = Some(ga);
                        }
                    }
                }
            }
        }
        Gradients {
            tape: self.id,
            grads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let mut tape = Tape::new();
        let x = tape.variable(x0.clone());
        let y = build(&mut tape, x);
        let g = tape.backward(y).get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.as_slice().len() {
            let mut xp = x0.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x0.clone();
            xm.as_mut_slice()[i] -= h;
            let f = |m: Mat| {
                let mut t = Tape::new();
                let v = t.constant(m);
                let out = build(&mut t, v);
                t.value(out).get(0, 0)
            };
            let fd = (f(xp) - f(xm)) / (2.0 * h);
            let an = g.as_slice()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coordinate {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn softplus_closed_forms() {
        assert!((softplus(0.0, 20.0) - core::f64::consts::LN_2 / 20.0).abs() < 1e-15);
        assert!((softplus(0.0, 20.0) - 0.0346574).abs() < 1e-7);
        for z in [2.0, -2.0] {
            assert!((softplus(z, 20.0) - z.max(0.0)).abs() < 1e-16);
        }
        assert!(softplus(1e6, 20.0).is_finite());
        assert_eq!(softplus(-1e6, 20.0), 0.0);
    }

    #[test]
    fn softplus_from_slope_agrees_with_direct_form() {
        for &z in &[-3.0, -0.4, -1e-3, 0.0, 1e-3, 0.2, 1.7, 5.0] {
            for &beta in &[1.0, 20.0] {
                let s = sigmoid(beta * z);
                let a = softplus_from_slope(z, s, beta);
                assert!((a - softplus(z, beta)).abs() <= 1e-15 * (1.0 + z.abs()), "z={z} beta={beta}");
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = Mat::from_rows(&[[0.3, -0.7, 1.1], [0.05, 0.4, -0.2]]).unwrap();
        fd_check(
            |t, x| {
                let s = t.softplus(x, 3.0);
                let g = t.sigmoid(x, 2.0);
                let sp2 = t.softplus_with_slope(x, g, 2.0);
                let s = t.add(s, sp2);
                let p = t.mul(s, g);
                let q = t.square(p);
                let r = t.lin_comb(&[(q, 0.5), (x, -1.5), (s, 2.0)]);
                let rs = t.row_sum(r);
                t.mean(rs)
            },
            x0,
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x0 = Mat::from_rows(&[[0.3, -0.7], [0.05, 0.4], [1.0, -2.0]]).unwrap();
        fd_check(
            |t, x| {
                let w = t.constant(Mat::from_rows(&[[1.0, 2.0, -1.0], [0.5, -0.3, 0.2]]).unwrap());
                let z = t.matmul(x, w);
                let bias = t.constant(Mat::from_rows(&[[0.1, 0.2, 0.3]]).unwrap());
                let z = t.add_row(z, bias);
                let z = t.mul_row(z, bias);
                let c = t.concat_cols(z, x);
                let c = t.square(c);
                let col = t.select_col(c, 3);
                t.mean(col)
            },
            x0,
        );
    }

    #[test]
    fn gradient_flows_into_right_operand_of_matmul() {
        let mut t = Tape::new();
        let x = t.constant(Mat::from_rows(&[[1.0, 2.0]]).unwrap());
        let w = t.variable(Mat::from_rows(&[[3.0], [4.0]]).unwrap());
        let y = t.matmul(x, w);
        let y = t.mean(y);
        let g = t.backward(y);
        assert_eq!(g.get(w).unwrap().as_slice(), &[1.0, 2.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.variable(Mat::from_rows(&[[0.3, -0.7], [1.5, 0.1]]).unwrap());
        let s = t.softplus(x, 20.0);
        let q = t.square(s);
        let m = t.mean(q);
        let replayed = t.replay();
        assert_eq!(replayed.len(), t.len());
        assert_eq!(replayed[m.index].as_slice(), t.value(m).as_slice());
    }

    #[test]
    #[should_panic(expected = "different tape")]
    fn foreign_variables_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.constant(Mat::zeros(1, 1));
        let _ = b.square(x);
    }
}
