//! Reverse-mode differentiation over dense matrices.
//!
//! Numerical routines in this crate are written once against [`Backend`]. The
//! [`Eager`] backend just computes values; [`Tape`] additionally records every
//! executed operation so that [`Tape::backward`] can sweep the recorded graph in
//! reverse and return gradients for every registered parameter.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    /// Natural log; every entry must be positive.
    Log,
    /// `max(x, 0)`, with derivative 0 at exactly 0.
    Relu,
    Sqrt,
    Scale(f64),
    Offset(f64),
    /// Clamp into `[lo, hi]`; derivative 1 inside the closed interval, 0 outside.
    Clamp(f64, f64),
}

/// Pointwise binary operations. The right operand may be the same shape as the
/// left, a `1 x cols` row vector, a `rows x 1` column vector or a `1 x 1` scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    /// All entries, giving `1 x 1`.
    Sum,
    /// Sum along each row, giving `rows x 1`.
    SumRows,
    /// Sum down each column, giving `1 x cols`.
    SumCols,
    LogSumExpRows,
    LogSumExpCols,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Unary(UnaryOp),
    Binary(BinaryOp),
    Reduce(ReduceOp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Full,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(a: &Matrix, b: &Matrix, op: &'static str) -> Result<Broadcast> {
    let (r, c) = a.shape();
    match b.shape() {
        s if s == (r, c) => Ok(Broadcast::Full),
        (1, 1) => Ok(Broadcast::Scalar),
        (1, bc) if bc == c => Ok(Broadcast::Row),
        (br, 1) if br == r => Ok(Broadcast::Col),
        s => Err(Error::Dimension {
            op,
            lhs: (r, c),
            rhs: s,
        }),
    }
}

#[inline]
fn bcast_at(b: &Matrix, kind: Broadcast, i: usize, j: usize) -> f64 {
    match kind {
        Broadcast::Full => b.get(i, j),
        Broadcast::Row => b.get(0, j),
        Broadcast::Col => b.get(i, 0),
        Broadcast::Scalar => b.get(0, 0),
    }
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_to(g: Matrix, kind: Broadcast) -> Matrix {
    match kind {
        Broadcast::Full => g,
        Broadcast::Row => Matrix::row_vector(&g.col_sums()),
        Broadcast::Col => Matrix::col_vector(&g.row_sums()),
        Broadcast::Scalar => Matrix::scalar(g.sum()),
    }
}

fn checked(m: Matrix, op: &'static str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite(op))
    }
}

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Relu => "relu",
        UnaryOp::Sqrt => "sqrt",
        UnaryOp::Scale(_) => "scale",
        UnaryOp::Offset(_) => "offset",
        UnaryOp::Clamp(..) => "clamp",
    }
}

pub fn unary(op: UnaryOp, a: &Matrix) -> Result<Matrix> {
    let out = match op {
        UnaryOp::Exp => a.map(f64::exp),
        UnaryOp::Log => {
            if let Some(v) = a.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain(format!("log of nonpositive entry {v}")));
            }
            a.map(f64::ln)
        }
        UnaryOp::Relu => a.map(|v| v.max(0.0)),
        UnaryOp::Sqrt => {
            if let Some(v) = a.data().iter().find(|v| **v < 0.0) {
                return Err(Error::Domain(format!("sqrt of negative entry {v}")));
            }
            a.map(f64::sqrt)
        }
        UnaryOp::Scale(s) => a.map(|v| v * s),
        UnaryOp::Offset(s) => a.map(|v| v + s),
        UnaryOp::Clamp(lo, hi) => a.map(|v| v.clamp(lo, hi)),
    };
    checked(out, unary_name(op))
}

pub fn binary(op: BinaryOp, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    };
    let kind = broadcast_kind(a, b, name)?;
    let f: fn(f64, f64) -> f64 = match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
        BinaryOp::Div => |x, y| x / y,
    };
    let out = Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), bcast_at(b, kind, i, j)));
    checked(out, name)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn reduce(op: ReduceOp, a: &Matrix) -> Result<Matrix> {
    let (r, c) = a.shape();
    let out = match op {
        ReduceOp::Sum => Matrix::scalar(a.sum()),
        ReduceOp::SumRows => Matrix::col_vector(&a.row_sums()),
        ReduceOp::SumCols => Matrix::row_vector(&a.col_sums()),
        ReduceOp::LogSumExpRows => Matrix::from_fn(r, 1, |i, _| log_sum_exp(a.row(i).iter().copied())),
        ReduceOp::LogSumExpCols => {
            Matrix::from_fn(1, c, |_, j| log_sum_exp((0..r).map(|i| a.get(i, j))))
        }
    };
    checked(out, "reduce")
}

fn forward(op: Op, inputs: &[&Matrix]) -> Result<Matrix> {
    match op {
        Op::Leaf => unreachable!("leaves carry their value"),
        Op::MatMul => checked(inputs[0].matmul(inputs[1])?, "matmul"),
        Op::Transpose => Ok(inputs[0].transpose()),
        Op::Unary(u) => unary(u, inputs[0]),
        Op::Binary(b) => binary(b, inputs[0], inputs[1]),
        Op::Reduce(r) => reduce(r, inputs[0]),
    }
}

/// Vector-Jacobian products of `op` for each input, given the upstream gradient `g`.
fn vjp(op: Op, inputs: &[&Matrix], out: &Matrix, g: &Matrix) -> Vec<Matrix> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                g.matmul(&b.transpose()).expect("matmul vjp shape"),
                a.transpose().matmul(g).expect("matmul vjp shape"),
            ]
        }
        Op::Transpose => vec![g.transpose()],
        Op::Unary(u) => {
            let a = inputs[0];
            let d = match u {
                UnaryOp::Exp => g.zip_map(out, |g, y| g * y),
                UnaryOp::Log => g.zip_map(a, |g, x| g / x),
                UnaryOp::Relu => g.zip_map(a, |g, x| if x > 0.0 { g } else { 0.0 }),
                UnaryOp::Sqrt => g.zip_map(out, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }),
                UnaryOp::Scale(s) => Ok(g.scale(s)),
                UnaryOp::Offset(_) => Ok(g.clone()),
                UnaryOp::Clamp(lo, hi) => {
                    g.zip_map(a, |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 })
                }
            };
            vec![d.expect("unary vjp shape")]
        }
        Op::Binary(bop) => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast_kind(a, b, "vjp").expect("validated in forward");
            let (r, c) = a.shape();
            let bb = |i, j| bcast_at(b, kind, i, j);
            let (ga, gb_full) = match bop {
                BinaryOp::Add => (g.clone(), g.clone()),
                BinaryOp::Sub => (g.clone(), g.scale(-1.0)),
                BinaryOp::Mul => (
                    Matrix::from_fn(r, c, |i, j| g.get(i, j) * bb(i, j)),
                    Matrix::from_fn(r, c, |i, j| g.get(i, j) * a.get(i, j)),
                ),
                BinaryOp::Div => (
                    Matrix::from_fn(r, c, |i, j| g.get(i, j) / bb(i, j)),
                    Matrix::from_fn(r, c, |i, j| {
                        let y = bb(i, j);
                        -g.get(i, j) * a.get(i, j) / (y * y)
                    }),
                ),
            };
            vec![ga, reduce_to(gb_full, kind)]
        }
        Op::Reduce(rop) => {
            let a = inputs[0];
            let (r, c) = a.shape();
            let d = match rop {
                ReduceOp::Sum => Matrix::filled(r, c, g.get(0, 0)),
                ReduceOp::SumRows => Matrix::from_fn(r, c, |i, _| g.get(i, 0)),
                ReduceOp::SumCols => Matrix::from_fn(r, c, |_, j| g.get(0, j)),
                ReduceOp::LogSumExpRows => {
                    Matrix::from_fn(r, c, |i, j| g.get(i, 0) * (a.get(i, j) - out.get(i, 0)).exp())
                }
                ReduceOp::LogSumExpCols => {
                    Matrix::from_fn(r, c, |i, j| g.get(0, j) * (a.get(i, j) - out.get(0, j)).exp())
                }
            };
            vec![d]
        }
    }
}

/// Operations shared by the eager and recording backends.
pub trait Backend {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Matrix;
    fn constant(&mut self, m: Matrix) -> Self::Var;
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn transpose(&mut self, a: &Self::Var) -> Self::Var;
    fn unary(&mut self, op: UnaryOp, a: &Self::Var) -> Result<Self::Var>;
    fn binary(&mut self, op: BinaryOp, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn reduce(&mut self, op: ReduceOp, a: &Self::Var) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.binary(BinaryOp::Add, a, b)
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.binary(BinaryOp::Sub, a, b)
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.binary(BinaryOp::Mul, a, b)
    }
    fn div(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.binary(BinaryOp::Div, a, b)
    }
    fn exp(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.unary(UnaryOp::Exp, a)
    }
    fn log(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.unary(UnaryOp::Log, a)
    }
    fn relu(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.unary(UnaryOp::Relu, a)
    }
    fn sqrt(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.unary(UnaryOp::Sqrt, a)
    }
    fn scale(&mut self, a: &Self::Var, s: f64) -> Result<Self::Var> {
        self.unary(UnaryOp::Scale(s), a)
    }
    fn offset(&mut self, a: &Self::Var, s: f64) -> Result<Self::Var> {
        self.unary(UnaryOp::Offset(s), a)
    }
    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.reduce(ReduceOp::Sum, a)
    }
    fn sum_rows(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.reduce(ReduceOp::SumRows, a)
    }
    fn sum_cols(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.reduce(ReduceOp::SumCols, a)
    }
    fn mean(&mut self, a: &Self::Var) -> Result<Self::Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Degenerate("mean of empty matrix".into()));
        }
        let s = self.sum(a)?;
        self.scale(&s, 1.0 / n as f64)
    }
    /// Frobenius inner product as a `1 x 1` value.
    fn dot(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        let p = self.mul(a, b)?;
        self.sum(&p)
    }
}

/// Value-only backend; nothing is recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type Var = Matrix;

    fn value<'a>(&'a self, v: &'a Matrix) -> &'a Matrix {
        v
    }
    fn constant(&mut self, m: Matrix) -> Matrix {
        m
    }
    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        forward(Op::MatMul, &[a, b])
    }
    fn transpose(&mut self, a: &Matrix) -> Matrix {
        a.transpose()
    }
    fn unary(&mut self, op: UnaryOp, a: &Matrix) -> Result<Matrix> {
        unary(op, a)
    }
    fn binary(&mut self, op: BinaryOp, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        binary(op, a, b)
    }
    fn reduce(&mut self, op: ReduceOp, a: &Matrix) -> Result<Matrix> {
        reduce(op, a)
    }
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: [u32; 2],
    arity: u8,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of executed operations.
///
/// Parents always precede their children, so the node list is already in
/// topological order. A tape is meant to be driven from a single thread.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: Vec<u32>,
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
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf; [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, m: Matrix) -> Var {
        let v = self.push(Op::Leaf, &[], m, true);
        self.params.push(v.index);
        v
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index as usize]
    }

    fn push(&mut self, op: Op, parents: &[Var], value: Matrix, requires_grad: bool) -> Var {
        let mut p = [0u32; 2];
        for (slot, v) in p.iter_mut().zip(parents) {
            *slot = v.index;
        }
        let index = u32::try_from(self.nodes.len()).expect("tape exceeds u32 nodes");
        self.nodes.push(Node {
            op,
            parents: p,
            arity: parents.len() as u8,
            value,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn record(&mut self, op: Op, parents: &[Var]) -> Result<Var> {
        let inputs: Vec<&Matrix> = parents.iter().map(|p| &self.node(*p).value).collect();
        let value = forward(op, &inputs)?;
        let requires_grad = parents.iter().any(|p| self.node(*p).requires_grad);
        Ok(self.push(op, parents, value, requires_grad))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.tape != self.id {
            return Err(Error::Contract("root was recorded on another tape".into()));
        }
        let root_idx = root.index as usize;
        if self.nodes[root_idx].value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {:?}",
                self.nodes[root_idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root_idx + 1];
        grads[root_idx] = Some(Matrix::scalar(1.0));
        for idx in (0..=root_idx).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let parents = &node.parents[..node.arity as usize];
            let inputs: Vec<&Matrix> = parents.iter().map(|&p| &self.nodes[p as usize].value).collect();
            let local = vjp(node.op, &inputs, &node.value, &g);
            for (&p, d) in parents.iter().zip(local) {
                let p = p as usize;
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(d),
                }
            }
        }
        let by_param = self
            .params
            .iter()
            .map(|&p| {
                let (r, c) = self.nodes[p as usize].value.shape();
                grads
                    .get_mut(p as usize)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(r, c))
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            params: self.params.clone(),
            grads: by_param,
        })
    }
}

impl Backend for Tape {
    type Var = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Matrix {
        &self.node(*v).value
    }
    fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, &[], m, false)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::MatMul, &[*a, *b])
    }
    fn transpose(&mut self, a: &Var) -> Var {
        self.record(Op::Transpose, &[*a]).expect("transpose cannot fail")
    }
    fn unary(&mut self, op: UnaryOp, a: &Var) -> Result<Var> {
        self.record(Op::Unary(op), &[*a])
    }
    fn binary(&mut self, op: BinaryOp, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Binary(op), &[*a, *b])
    }
    fn reduce(&mut self, op: ReduceOp, a: &Var) -> Result<Var> {
        self.record(Op::Reduce(op), &[*a])
    }
}

/// Gradients of a scalar root with respect to every parameter of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    params: Vec<u32>,
    grads: Vec<Matrix>,
}

impl Gradients {
    /// Gradient for `param`, or `None` if it is not a parameter of the tape.
    pub fn get(&self, param: Var) -> Option<&Matrix> {
        if param.tape != self.tape {
            return None;
        }
        self.params
            .iter()
            .position(|&p| p == param.index)
            .map(|i| &self.grads[i])
    }

    /// Gradients in parameter registration order.
    pub fn in_order(&self) -> &[Matrix] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Matrix> {
        self.grads
    }
}

/// Scales each row to unit Euclidean norm.
pub fn normalize_rows<B: Backend>(b: &mut B, a: &B::Var) -> Result<B::Var> {
    if let Some(i) = b.value(a).row_norms().iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("row {i} has zero norm")));
    }
    let sq = b.mul(a, a)?;
    let ss = b.sum_rows(&sq)?;
    let norms = b.sqrt(&ss)?;
    b.div(a, &norms)
}

/// Entry `(i, j)` is the cosine similarity of row `i` of `a` and row `j` of `x`,
/// clamped into `[-1, 1]`.
pub fn cosine_similarity_matrix<B: Backend>(b: &mut B, a: &B::Var, x: &B::Var) -> Result<B::Var> {
    let (ac, xc) = (b.value(a).cols(), b.value(x).cols());
    if ac != xc {
        return Err(Error::Dimension {
            op: "cosine_similarity_matrix",
            lhs: b.value(a).shape(),
            rhs: b.value(x).shape(),
        });
    }
    let an = normalize_rows(b, a)?;
    let xn = normalize_rows(b, x)?;
    let xt = b.transpose(&xn);
    let sim = b.matmul(&an, &xt)?;
    b.unary(UnaryOp::Clamp(-1.0, 1.0), &sim)
}

/// Cosine similarity of two equal-length vectors; `None` when either is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> Option<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Some((dot / (nu * nv)).clamp(-1.0, 1.0))
}
