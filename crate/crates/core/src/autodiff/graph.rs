//! Append-only computation graph over [`Tensor`]s.
//!
//! Construction is symbolic: every builder method appends (or reuses) a node
//! and checks shapes immediately. Values are produced by [`Graph::run`] for a
//! [`Plan`], which only touches the ancestors of the requested targets.
//!
//! Derivatives are themselves graph construction. [`Graph::vjp`] appends the
//! reverse-mode adjoint nodes and [`Graph::jvp`] the forward-mode tangent
//! nodes, so derivatives of derivatives come for free: a Hessian-vector
//! product is a `jvp` of a `vjp`, and a parameter gradient of a loss that
//! contains Hessians is one more `vjp` on top.
//!
//! Pure nodes are hash-consed, so rebuilding the same expression returns the
//! same node ids and evaluates once.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::math;
use crate::tensor::{gemm, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Unary {
    Softplus,
    Sigmoid,
    Elu,
    /// Derivative of ELU.
    EluGrad,
    Relu,
    /// Heaviside step, `step(0) = 0`. Zero derivative.
    Step,
    Tanh,
    /// `log(e^x + e^-x)`.
    LogCosh,
    Abs,
    /// Zero derivative.
    Sign,
    Exp,
    Square,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Softplus => math::softplus(x),
            Unary::Sigmoid => math::sigmoid(x),
            Unary::Elu => math::elu(x),
            Unary::EluGrad => math::elu_grad(x),
            Unary::Relu => math::relu(x),
            Unary::Step => math::step(x),
            Unary::Tanh => math::tanh(x),
            Unary::LogCosh => math::log_cosh2(x),
            Unary::Abs => x.abs(),
            Unary::Sign => math::sign(x),
            Unary::Exp => math::exp(x),
            Unary::Square => x * x,
        }
    }
}

/// The closed primitive set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Op {
    Input(String),
    Constant,
    /// `op(a) * op(b)`, `op` transposing when the flag is set.
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    /// Elementwise with row/column broadcasting of size-1 dimensions.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale * x + shift`, constants stored as raw bits.
    Affine { x: NodeId, scale: u64, shift: u64 },
    Unary(Unary, NodeId),
    /// Row sums, `(r, c) -> (r, 1)`.
    SumCols(NodeId),
    /// Total, `-> (1, 1)`.
    SumAll(NodeId),
    /// Mean of all entries, `-> (1, 1)`.
    MeanAll(NodeId),
    /// Reduces broadcast dimensions down to `shape`.
    SumTo { x: NodeId, rows: usize, cols: usize },
    /// Repeats size-1 dimensions up to `shape`.
    BroadcastTo { x: NodeId, rows: usize, cols: usize },
    /// Column concatenation.
    Concat(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    /// Places `x` at column `start` of a zero matrix with `total` columns.
    PadCols { x: NodeId, start: usize, total: usize },
    /// Row-wise `log det` of `n x n` SPD matrices stored row-major in each row.
    LogdetSpd(NodeId),
    /// Row-wise inverse of `n x n` SPD matrices.
    SpdInverse(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::Affine { .. } => "affine",
            Op::Unary(u, _) => match u {
                Unary::Softplus => "softplus",
                Unary::Sigmoid => "sigmoid",
                Unary::Elu => "elu",
                Unary::EluGrad => "elu_grad",
                Unary::Relu => "relu",
                Unary::Step => "step",
                Unary::Tanh => "tanh",
                Unary::LogCosh => "logcosh",
                Unary::Abs => "abs",
                Unary::Sign => "sign",
                Unary::Exp => "exp",
                Unary::Square => "square",
            },
            Op::SumCols(_) => "sum_cols",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumTo { .. } => "sum_to",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::Concat(_) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::LogdetSpd(_) => "logdet_spd",
            Op::SpdInverse(_) => "spd_inverse",
        }
    }

    fn parents(&self) -> ParentIter<'_> {
        let (fixed, list): ([Option<NodeId>; 2], &[NodeId]) = match self {
            Op::Input(_) | Op::Constant => ([None, None], &[]),
            Op::MatMul { a, b, .. } => ([Some(*a), Some(*b)], &[]),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => ([Some(*a), Some(*b)], &[]),
            Op::Affine { x, .. }
            | Op::Unary(_, x)
            | Op::SumCols(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::SumTo { x, .. }
            | Op::BroadcastTo { x, .. }
            | Op::SliceCols { x, .. }
            | Op::PadCols { x, .. }
            | Op::LogdetSpd(x)
            | Op::SpdInverse(x) => ([Some(*x), None], &[]),
            Op::Concat(parts) => ([None, None], parts.as_slice()),
        };
        ParentIter { fixed, pos: 0, list }
    }
}

struct ParentIter<'a> {
    fixed: [Option<NodeId>; 2],
    pos: usize,
    list: &'a [NodeId],
}

impl Iterator for ParentIter<'_> {
    type Item = NodeId;
    fn next(&mut self) -> Option<NodeId> {
        while self.pos < 2 {
            let p = self.fixed[self.pos];
            self.pos += 1;
            if p.is_some() {
                return p;
            }
        }
        let i = self.pos - 2;
        if i < self.list.len() {
            self.pos += 1;
            Some(self.list[i])
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("shape mismatch building node {node} ({op}): {lhs:?} vs {rhs:?}")]
    Shape { node: usize, op: &'static str, lhs: Shape, rhs: Shape },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("input `{name}` is not bound")]
    Unbound { name: String },
    #[error("no input named `{name}`")]
    UnknownInput { name: String },
    #[error("input `{name}` expects shape {expected:?}, got {got:?}")]
    InputShape { name: String, expected: Shape, got: Shape },
    #[error("node {node} has not been evaluated; run the graph first")]
    NotEvaluated { node: usize },
    #[error("expected a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Shape },
    #[error("{op}: {what} is not supported")]
    Unsupported { op: &'static str, what: &'static str },
    #[error("node {node} ({op}), row {row}: {source}")]
    Linalg { node: usize, op: &'static str, row: usize, source: LinalgError },
}

struct Node {
    op: Op,
    shape: Shape,
}

/// Nodes to evaluate for a set of targets, in topological order, with the
/// position after which each intermediate may be released.
#[derive(Debug, Clone)]
pub struct Plan {
    order: Vec<NodeId>,
    /// `release[p]` lists nodes whose last use is `order[p]`.
    release: Vec<Vec<NodeId>>,
}

impl Plan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    stamp: Vec<u32>,
    epoch: u32,
    interned: BTreeMap<Op, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    one: Option<NodeId>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).field("inputs", &self.inputs.len()).finish()
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn reducible(from: Shape, to: Shape) -> bool {
    (to.0 == from.0 || to.0 == 1) && (to.1 == from.1 || to.1 == 1)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            stamp: Vec::new(),
            epoch: 1,
            interned: BTreeMap::new(),
            inputs: BTreeMap::new(),
            one: None,
            check_finite: true,
        }
    }

    /// Disables the per-node finiteness scan (the loss value is still checked
    /// by callers that care).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.index()].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.index()].op
    }

    fn push(&mut self, op: Op, shape: Shape, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, shape });
        self.values.push(value);
        self.stamp.push(0);
        id
    }

    fn intern(&mut self, op: Op, shape: Shape) -> NodeId {
        if let Some(&id) = self.interned.get(&op) {
            return id;
        }
        let id = self.push(op.clone(), shape, None);
        self.interned.insert(op, id);
        id
    }

    fn shape_err(&self, op: &'static str, lhs: Shape, rhs: Shape) -> GraphError {
        GraphError::Shape { node: self.nodes.len(), op, lhs, rhs }
    }

    // ---- leaves -------------------------------------------------------

    /// Named input leaf. Requesting an existing name with the same shape
    /// returns the existing node.
    pub fn input(&mut self, name: &str, shape: Shape) -> Result<NodeId, GraphError> {
        if let Some(&id) = self.inputs.get(name) {
            let have = self.shape(id);
            if have != shape {
                return Err(GraphError::InputShape { name: name.to_string(), expected: have, got: shape });
            }
            return Ok(id);
        }
        let id = self.push(Op::Input(name.to_string()), shape, None);
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        let id = self.push(Op::Constant, shape, Some(value));
        self.stamp[id.index()] = u32::MAX;
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ---- builders -----------------------------------------------------

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId, GraphError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = if ta { (sa.1, sa.0) } else { sa };
        let (k2, n) = if tb { (sb.1, sb.0) } else { sb };
        if k != k2 {
            return Err(self.shape_err("matmul", sa, sb));
        }
        Ok(self.intern(Op::MatMul { a, b, ta, tb }, (m, n)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.matmul_t(a, false, b, false)
    }

    /// `x Wᵀ`: applies a weight matrix of shape `(out, in)` to row samples.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, GraphError> {
        self.matmul_t(x, false, w, true)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &'static str, make: fn(NodeId, NodeId) -> Op) -> Result<NodeId, GraphError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let shape = broadcast_shape(sa, sb).ok_or_else(|| self.shape_err(name, sa, sb))?;
        Ok(self.intern(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        // Canonical operand order improves sharing.
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.binary(a, b, "add", Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, "sub", Op::Sub)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.binary(a, b, "hadamard", Op::Mul)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        if scale == 1.0 && shift == 0.0 {
            return x;
        }
        let shape = self.shape(x);
        self.intern(Op::Affine { x, scale: scale.to_bits(), shift: shift.to_bits() }, shape)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn unary(&mut self, u: Unary, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.intern(Op::Unary(u, x), shape)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Softplus, x)
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Elu, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Relu, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Tanh, x)
    }

    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let (r, _) = self.shape(x);
        self.intern(Op::SumCols(x), (r, 1))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.intern(Op::SumAll(x), (1, 1))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.intern(Op::MeanAll(x), (1, 1))
    }

    /// Row-wise squared Euclidean norm, `(r, c) -> (r, 1)`.
    pub fn square_norm(&mut self, x: NodeId) -> NodeId {
        let sq = self.unary(Unary::Square, x);
        self.sum_cols(sq)
    }

    pub fn sum_to(&mut self, x: NodeId, shape: Shape) -> Result<NodeId, GraphError> {
        let sx = self.shape(x);
        if sx == shape {
            return Ok(x);
        }
        if !reducible(sx, shape) {
            return Err(self.shape_err("sum_to", sx, shape));
        }
        Ok(self.intern(Op::SumTo { x, rows: shape.0, cols: shape.1 }, shape))
    }

    pub fn broadcast_to(&mut self, x: NodeId, shape: Shape) -> Result<NodeId, GraphError> {
        let sx = self.shape(x);
        if sx == shape {
            return Ok(x);
        }
        if !reducible(shape, sx) {
            return Err(self.shape_err("broadcast_to", sx, shape));
        }
        Ok(self.intern(Op::BroadcastTo { x, rows: shape.0, cols: shape.1 }, shape))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(self.shape_err("concat", (rows, cols), s));
            }
            cols += s.1;
        }
        Ok(self.intern(Op::Concat(parts.to_vec()), (rows, cols)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let s = self.shape(x);
        if start + len > s.1 {
            return Err(self.shape_err("slice_cols", s, (start, len)));
        }
        if start == 0 && len == s.1 {
            return Ok(x);
        }
        Ok(self.intern(Op::SliceCols { x, start, len }, (s.0, len)))
    }

    pub fn pad_cols(&mut self, x: NodeId, start: usize, total: usize) -> Result<NodeId, GraphError> {
        let s = self.shape(x);
        if start + s.1 > total {
            return Err(self.shape_err("pad_cols", s, (start, total)));
        }
        if start == 0 && total == s.1 {
            return Ok(x);
        }
        Ok(self.intern(Op::PadCols { x, start, total }, (s.0, total)))
    }

    fn square_rows_dim(&self, x: NodeId, op: &'static str) -> Result<usize, GraphError> {
        let s = self.shape(x);
        let n = (1..=s.1).find(|n| n * n >= s.1).unwrap_or(0);
        if n * n != s.1 || s.1 == 0 {
            return Err(self.shape_err(op, s, (n, n)));
        }
        Ok(n)
    }

    /// Row-wise SPD log-determinant; each row holds a row-major `n x n` matrix.
    pub fn logdet_spd(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.square_rows_dim(x, "logdet_spd")?;
        let (r, _) = self.shape(x);
        Ok(self.intern(Op::LogdetSpd(x), (r, 1)))
    }

    pub fn spd_inverse(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.square_rows_dim(x, "spd_inverse")?;
        let s = self.shape(x);
        Ok(self.intern(Op::SpdInverse(x), s))
    }

    // ---- derivative construction ---------------------------------------

    fn acc(&mut self, slot: &mut Option<NodeId>, g: NodeId) -> Result<(), GraphError> {
        *slot = Some(match *slot {
            None => g,
            Some(prev) => self.add(prev, g)?,
        });
        Ok(())
    }

    /// Appends reverse-mode adjoint nodes of `output` seeded with `seed`
    /// (same shape as `output`) and returns the adjoints of `wrt`; `None`
    /// means the adjoint is structurally zero.
    pub fn vjp(&mut self, output: NodeId, seed: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>, GraphError> {
        let so = self.shape(output);
        let ss = self.shape(seed);
        if so != ss {
            return Err(self.shape_err("vjp seed", so, ss));
        }
        let top = output.index();
        let lowest = wrt.iter().map(|w| w.index()).min().unwrap_or(0);
        let mut adj: Vec<Option<NodeId>> = vec![None; top + 1];
        adj[top] = Some(seed);
        for i in (lowest..=top).rev() {
            let Some(g) = adj[i] else { continue };
            let node = NodeId(i as u32);
            let op = self.nodes[i].op.clone();
            self.vjp_rule(node, &op, g, &mut adj)?;
        }
        Ok(wrt.iter().map(|w| adj.get(w.index()).copied().flatten()).collect())
    }

    /// Gradient of a `1x1` output.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>, GraphError> {
        let s = self.shape(output);
        if s != (1, 1) {
            return Err(GraphError::NonScalarRoot { shape: s });
        }
        let one = self.one();
        self.vjp(output, one, wrt)
    }

    fn one(&mut self) -> NodeId {
        match self.one {
            Some(id) => id,
            None => {
                let id = self.constant(Tensor::scalar(1.0));
                self.one = Some(id);
                id
            }
        }
    }

    fn vjp_rule(&mut self, y: NodeId, op: &Op, g: NodeId, adj: &mut [Option<NodeId>]) -> Result<(), GraphError> {
        match *op {
            Op::Input(_) | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                let ga = if ta { self.matmul_t(b, tb, g, true)? } else { self.matmul_t(g, false, b, !tb)? };
                let gb = if tb { self.matmul_t(g, true, a, ta)? } else { self.matmul_t(a, !ta, g, false)? };
                self.acc(&mut adj[a.index()], ga)?;
                self.acc(&mut adj[b.index()], gb)?;
            }
            Op::Add(a, b) => {
                let ga = self.sum_to(g, self.shape(a))?;
                let gb = self.sum_to(g, self.shape(b))?;
                self.acc(&mut adj[a.index()], ga)?;
                self.acc(&mut adj[b.index()], gb)?;
            }
            Op::Sub(a, b) => {
                let ga = self.sum_to(g, self.shape(a))?;
                let gb = self.sum_to(g, self.shape(b))?;
                let gb = self.neg(gb);
                self.acc(&mut adj[a.index()], ga)?;
                self.acc(&mut adj[b.index()], gb)?;
            }
            Op::Mul(a, b) => {
                let gab = self.mul(g, b)?;
                let ga = self.sum_to(gab, self.shape(a))?;
                let gba = self.mul(g, a)?;
                let gb = self.sum_to(gba, self.shape(b))?;
                self.acc(&mut adj[a.index()], ga)?;
                self.acc(&mut adj[b.index()], gb)?;
            }
            Op::Affine { x, scale, .. } => {
                let gx = self.scale(g, f64::from_bits(scale));
                self.acc(&mut adj[x.index()], gx)?;
            }
            Op::Unary(u, x) => {
                if let Some(d) = self.unary_derivative(u, x, y)? {
                    let gx = self.mul(g, d)?;
                    self.acc(&mut adj[x.index()], gx)?;
                }
            }
            Op::SumCols(x) | Op::SumAll(x) | Op::SumTo { x, .. } => {
                let gx = self.broadcast_to(g, self.shape(x))?;
                self.acc(&mut adj[x.index()], gx)?;
            }
            Op::MeanAll(x) => {
                let s = self.shape(x);
                let b = self.broadcast_to(g, s)?;
                let gx = self.scale(b, 1.0 / (s.0 * s.1) as f64);
                self.acc(&mut adj[x.index()], gx)?;
            }
            Op::BroadcastTo { x, .. } => {
                let gx = self.sum_to(g, self.shape(x))?;
                self.acc(&mut adj[x.index()], gx)?;
            }
            Op::Concat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    let gp = self.slice_cols(g, off, c)?;
                    self.acc(&mut adj[p.index()], gp)?;
                    off += c;
                }
            }
            Op::SliceCols { x, start, .. } => {
                let total = self.shape(x).1;
                let gx = self.pad_cols(g, start, total)?;
                self.acc(&mut adj[x.index()], gx)?;
            }
            Op::PadCols { x, start, .. } => {
                let len = self.shape(x).1;
                let gx = self.slice_cols(g, start, len)?;
                self.acc(&mut adj[x.index()], gx)?;
            }
            Op::LogdetSpd(x) => {
                // d log det H = tr(H⁻¹ dH): adjoint s·H⁻¹ per row.
                let inv = self.spd_inverse(x)?;
                let gx = self.mul(inv, g)?;
                self.acc(&mut adj[x.index()], gx)?;
            }
            Op::SpdInverse(_) => {
                return Err(GraphError::Unsupported { op: "spd_inverse", what: "reverse-mode differentiation" });
            }
        }
        Ok(())
    }

    /// Elementwise derivative `dy/dx` for `y = u(x)`; `None` if identically zero.
    fn unary_derivative(&mut self, u: Unary, x: NodeId, y: NodeId) -> Result<Option<NodeId>, GraphError> {
        Ok(Some(match u {
            Unary::Softplus => self.unary(Unary::Sigmoid, x),
            Unary::Sigmoid => {
                let one_minus = self.affine(y, -1.0, 1.0);
                self.mul(y, one_minus)?
            }
            Unary::Elu => self.unary(Unary::EluGrad, x),
            Unary::EluGrad => {
                let st = self.unary(Unary::Step, x);
                self.sub(y, st)?
            }
            Unary::Relu => self.unary(Unary::Step, x),
            Unary::Step | Unary::Sign => return Ok(None),
            Unary::Tanh => {
                let sq = self.unary(Unary::Square, y);
                self.affine(sq, -1.0, 1.0)
            }
            Unary::LogCosh => self.unary(Unary::Tanh, x),
            Unary::Abs => self.unary(Unary::Sign, x),
            Unary::Exp => y,
            Unary::Square => self.scale(x, 2.0),
        }))
    }

    /// Appends forward-mode tangent nodes. `seeds` pairs input nodes with
    /// their tangent nodes; returns the tangents of `outputs`.
    pub fn jvp(&mut self, outputs: &[NodeId], seeds: &[(NodeId, NodeId)]) -> Result<Vec<Option<NodeId>>, GraphError> {
        for &(x, dx) in seeds {
            let (sx, sd) = (self.shape(x), self.shape(dx));
            if sx != sd {
                return Err(self.shape_err("jvp tangent", sx, sd));
            }
        }
        let top = outputs.iter().map(|o| o.index()).max().unwrap_or(0);
        let lowest = seeds.iter().map(|s| s.0.index()).min().unwrap_or(top + 1);
        let mut tan: Vec<Option<NodeId>> = vec![None; top + 1];
        for &(x, dx) in seeds {
            tan[x.index()] = Some(dx);
        }
        for i in lowest..=top {
            if tan[i].is_some() && seeds.iter().any(|s| s.0.index() == i) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let has = op.parents().any(|p| tan[p.index()].is_some());
            if !has {
                continue;
            }
            tan[i] = self.jvp_rule(NodeId(i as u32), &op, &tan)?;
        }
        Ok(outputs.iter().map(|o| tan[o.index()]).collect())
    }

    fn add_opt(&mut self, a: Option<NodeId>, b: Option<NodeId>) -> Result<Option<NodeId>, GraphError> {
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(self.add(a, b)?),
            (x, None) | (None, x) => x,
        })
    }

    fn jvp_rule(&mut self, y: NodeId, op: &Op, tan: &[Option<NodeId>]) -> Result<Option<NodeId>, GraphError> {
        let t = |n: NodeId| tan[n.index()];
        let out_shape = self.shape(y);
        Ok(match *op {
            Op::Input(_) | Op::Constant => None,
            Op::MatMul { a, b, ta, tb } => {
                let l = match t(a) {
                    Some(da) => Some(self.matmul_t(da, ta, b, tb)?),
                    None => None,
                };
                let r = match t(b) {
                    Some(db) => Some(self.matmul_t(a, ta, db, tb)?),
                    None => None,
                };
                self.add_opt(l, r)?
            }
            Op::Add(a, b) => {
                let s = self.add_opt(t(a), t(b))?;
                match s {
                    Some(s) => Some(self.broadcast_to(s, out_shape)?),
                    None => None,
                }
            }
            Op::Sub(a, b) => {
                let nb = t(b).map(|db| self.neg(db));
                let s = self.add_opt(t(a), nb)?;
                match s {
                    Some(s) => Some(self.broadcast_to(s, out_shape)?),
                    None => None,
                }
            }
            Op::Mul(a, b) => {
                let l = match t(a) {
                    Some(da) => Some(self.mul(da, b)?),
                    None => None,
                };
                let r = match t(b) {
                    Some(db) => Some(self.mul(a, db)?),
                    None => None,
                };
                match self.add_opt(l, r)? {
                    Some(s) => Some(self.broadcast_to(s, out_shape)?),
                    None => None,
                }
            }
            Op::Affine { x, scale, .. } => t(x).map(|dx| self.scale(dx, f64::from_bits(scale))),
            Op::Unary(u, x) => match (t(x), self.unary_derivative(u, x, y)?) {
                (Some(dx), Some(d)) => Some(self.mul(dx, d)?),
                _ => None,
            },
            Op::SumCols(x) => t(x).map(|dx| self.sum_cols(dx)),
            Op::SumAll(x) => t(x).map(|dx| self.sum(dx)),
            Op::MeanAll(x) => t(x).map(|dx| self.mean(dx)),
            Op::SumTo { x, rows, cols } => match t(x) {
                Some(dx) => Some(self.sum_to(dx, (rows, cols))?),
                None => None,
            },
            Op::BroadcastTo { x, rows, cols } => match t(x) {
                Some(dx) => Some(self.broadcast_to(dx, (rows, cols))?),
                None => None,
            },
            Op::Concat(ref parts) => {
                if parts.iter().all(|&p| t(p).is_some()) {
                    let ts: Vec<NodeId> = parts.iter().map(|&p| t(p).unwrap()).collect();
                    Some(self.concat(&ts)?)
                } else {
                    let total = out_shape.1;
                    let mut off = 0;
                    let mut acc = None;
                    for &p in parts {
                        let c = self.shape(p).1;
                        if let Some(dp) = t(p) {
                            let padded = self.pad_cols(dp, off, total)?;
                            acc = self.add_opt(acc, Some(padded))?;
                        }
                        off += c;
                    }
                    acc
                }
            }
            Op::SliceCols { x, start, len } => match t(x) {
                Some(dx) => Some(self.slice_cols(dx, start, len)?),
                None => None,
            },
            Op::PadCols { x, start, total } => match t(x) {
                Some(dx) => Some(self.pad_cols(dx, start, total)?),
                None => None,
            },
            Op::LogdetSpd(x) => match t(x) {
                Some(dx) => {
                    let inv = self.spd_inverse(x)?;
                    let prod = self.mul(inv, dx)?;
                    Some(self.sum_cols(prod))
                }
                None => None,
            },
            Op::SpdInverse(_) => {
                return Err(GraphError::Unsupported { op: "spd_inverse", what: "forward-mode differentiation" });
            }
        })
    }

    // ---- evaluation -----------------------------------------------------

    /// Binds an input by node id.
    pub fn bind_id(&mut self, id: NodeId, value: Tensor) -> Result<(), GraphError> {
        let expected = self.shape(id);
        let name = match &self.nodes[id.index()].op {
            Op::Input(n) => n,
            _ => return Err(GraphError::UnknownInput { name: alloc::format!("{id}") }),
        };
        if value.shape() != expected {
            return Err(GraphError::InputShape { name: name.clone(), expected, got: value.shape() });
        }
        self.values[id.index()] = Some(value);
        Ok(())
    }

    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<(), GraphError> {
        let id = self.input_id(name).ok_or_else(|| GraphError::UnknownInput { name: name.to_string() })?;
        self.bind_id(id, value)
    }

    /// Copies into an already-bound input buffer when shapes agree.
    pub fn bind_from(&mut self, id: NodeId, value: &Tensor) -> Result<(), GraphError> {
        match &mut self.values[id.index()] {
            Some(slot) if slot.shape() == value.shape() => {
                slot.data_mut().copy_from_slice(value.data());
                Ok(())
            }
            _ => self.bind_id(id, value.clone()),
        }
    }

    pub fn plan(&self, targets: &[NodeId]) -> Plan {
        let n = self.nodes.len();
        let mut needed = vec![false; n];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            let i = id.index();
            if needed[i] {
                continue;
            }
            needed[i] = true;
            for p in self.nodes[i].op.parents() {
                if !needed[p.index()] {
                    stack.push(p);
                }
            }
        }
        let order: Vec<NodeId> = (0..n).filter(|&i| needed[i]).map(|i| NodeId(i as u32)).collect();
        let mut pos = vec![usize::MAX; n];
        for (p, id) in order.iter().enumerate() {
            pos[id.index()] = p;
        }
        let mut last_use = vec![usize::MAX; n];
        for (p, id) in order.iter().enumerate() {
            for par in self.nodes[id.index()].op.parents() {
                last_use[par.index()] = p;
            }
        }
        let mut release = vec![Vec::new(); order.len()];
        let is_target = |i: usize| targets.iter().any(|t| t.index() == i);
        for id in &order {
            let i = id.index();
            let leaf = matches!(self.nodes[i].op, Op::Input(_) | Op::Constant);
            if !leaf && !is_target(i) && last_use[i] != usize::MAX {
                release[last_use[i]].push(*id);
            }
        }
        Plan { order, release }
    }

    /// Evaluates a plan with the currently bound inputs, starting a new
    /// evaluation epoch. Intermediates are released after their last use.
    pub fn run(&mut self, plan: &Plan) -> Result<(), GraphError> {
        self.epoch = self.epoch.wrapping_add(1).max(1);
        if self.epoch == u32::MAX {
            self.epoch = 1;
        }
        self.run_inner(plan)
    }

    /// Evaluates a plan without starting a new epoch: nodes computed since
    /// the last [`Graph::run`] are reused.
    pub fn run_more(&mut self, plan: &Plan) -> Result<(), GraphError> {
        self.run_inner(plan)
    }

    fn run_inner(&mut self, plan: &Plan) -> Result<(), GraphError> {
        for (p, &id) in plan.order.iter().enumerate() {
            let i = id.index();
            if self.stamp[i] == self.epoch || self.stamp[i] == u32::MAX {
                continue;
            }
            if let Op::Input(name) = &self.nodes[i].op {
                if self.values[i].is_none() {
                    return Err(GraphError::Unbound { name: name.clone() });
                }
                self.stamp[i] = self.epoch;
                continue;
            }
            let out = self.values[i].take();
            let v = self.compute(id, out)?;
            if self.check_finite && !v.is_finite() {
                return Err(GraphError::NonFinite { node: i, op: self.nodes[i].op.name() });
            }
            self.values[i] = Some(v);
            self.stamp[i] = self.epoch;
            for r in &plan.release[p] {
                // Keep values computed earlier in the epoch that other plans may reuse.
                self.values[r.index()] = None;
                self.stamp[r.index()] = 0;
            }
        }
        Ok(())
    }

    /// Convenience: plan + run for the given targets.
    pub fn evaluate(&mut self, targets: &[NodeId]) -> Result<(), GraphError> {
        let plan = self.plan(targets);
        self.run(&plan)
    }

    /// Binds named inputs, evaluates `root`, and returns its value.
    pub fn evaluate_with(&mut self, inputs: &[(&str, Tensor)], root: NodeId) -> Result<Tensor, GraphError> {
        for (name, t) in inputs {
            self.bind(name, t.clone())?;
        }
        self.evaluate(&[root])?;
        Ok(self.value(root).clone())
    }

    /// Panics if the node was not evaluated (or was released).
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.try_value(id).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor, GraphError> {
        let i = id.index();
        match &self.values[i] {
            Some(v) if self.stamp[i] == self.epoch || self.stamp[i] == u32::MAX => Ok(v),
            _ => Err(GraphError::NotEvaluated { node: i }),
        }
    }

    /// Numeric reverse pass: seeds `root` (which must have been evaluated in
    /// the current epoch) and returns the adjoints of `wrt` (zeros when
    /// structurally independent).
    pub fn backward(&mut self, root: NodeId, seed: Tensor, wrt: &[NodeId]) -> Result<Vec<Tensor>, GraphError> {
        self.try_value(root)?;
        let seed_id = self.input("__seed", seed.shape())?;
        if self.shape(root) != seed.shape() {
            return Err(self.shape_err("backward seed", self.shape(root), seed.shape()));
        }
        let grads = self.vjp(root, seed_id, wrt)?;
        self.values[seed_id.index()] = Some(seed);
        self.stamp[seed_id.index()] = 0;
        let targets: Vec<NodeId> = grads.iter().flatten().copied().collect();
        let plan = self.plan(&targets);
        self.run_more(&plan)?;
        Ok(grads
            .iter()
            .zip(wrt)
            .map(|(g, w)| match g {
                Some(g) => self.value(*g).clone(),
                None => {
                    let (r, c) = self.shape(*w);
                    Tensor::zeros(r, c)
                }
            })
            .collect())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.index()].as_ref().expect("parent evaluated before child")
    }

    fn compute(&self, id: NodeId, reuse: Option<Tensor>) -> Result<Tensor, GraphError> {
        let i = id.index();
        let shape = self.nodes[i].shape;
        let mut out = match reuse {
            Some(t) if t.shape() == shape => t,
            _ => Tensor::zeros(shape.0, shape.1),
        };
        match self.nodes[i].op {
            Op::Input(_) | Op::Constant => unreachable!("leaves are not computed"),
            Op::MatMul { a, b, ta, tb } => gemm(self.val(a), ta, self.val(b), tb, &mut out),
            Op::Add(a, b) => broadcast_zip(self.val(a), self.val(b), &mut out, |x, y| x + y),
            Op::Sub(a, b) => broadcast_zip(self.val(a), self.val(b), &mut out, |x, y| x - y),
            Op::Mul(a, b) => broadcast_zip(self.val(a), self.val(b), &mut out, |x, y| x * y),
            Op::Affine { x, scale, shift } => {
                let (s, c) = (f64::from_bits(scale), f64::from_bits(shift));
                for (o, v) in out.data_mut().iter_mut().zip(self.val(x).data()) {
                    *o = s * v + c;
                }
            }
            Op::Unary(u, x) => {
                for (o, v) in out.data_mut().iter_mut().zip(self.val(x).data()) {
                    *o = u.apply(*v);
                }
            }
            Op::SumCols(x) => {
                let xv = self.val(x);
                for r in 0..xv.rows() {
                    out.data_mut()[r] = xv.row(r).iter().sum();
                }
            }
            Op::SumAll(x) => out.data_mut()[0] = self.val(x).sum(),
            Op::MeanAll(x) => {
                let xv = self.val(x);
                out.data_mut()[0] = xv.sum() / xv.len() as f64;
            }
            Op::SumTo { x, .. } => {
                let xv = self.val(x);
                out.data_mut().iter_mut().for_each(|v| *v = 0.0);
                let (orows, ocols) = shape;
                for r in 0..xv.rows() {
                    let ro = if orows == 1 { 0 } else { r };
                    for c in 0..xv.cols() {
                        let co = if ocols == 1 { 0 } else { c };
                        out[(ro, co)] += xv[(r, c)];
                    }
                }
            }
            Op::BroadcastTo { x, .. } => {
                let xv = self.val(x);
                let (xr, xc) = xv.shape();
                for r in 0..shape.0 {
                    let ri = if xr == 1 { 0 } else { r };
                    for c in 0..shape.1 {
                        let ci = if xc == 1 { 0 } else { c };
                        out[(r, c)] = xv[(ri, ci)];
                    }
                }
            }
            Op::Concat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.val(p);
                    let c = pv.cols();
                    for r in 0..shape.0 {
                        out.row_mut(r)[off..off + c].copy_from_slice(pv.row(r));
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.val(x);
                for r in 0..shape.0 {
                    out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
                }
            }
            Op::PadCols { x, start, .. } => {
                let xv = self.val(x);
                out.data_mut().iter_mut().for_each(|v| *v = 0.0);
                let c = xv.cols();
                for r in 0..shape.0 {
                    out.row_mut(r)[start..start + c].copy_from_slice(xv.row(r));
                }
            }
            Op::LogdetSpd(x) => {
                let xv = self.val(x);
                let n = self.square_rows_dim(x, "logdet_spd")?;
                let mut l = vec![0.0; n * n];
                for r in 0..xv.rows() {
                    let h = xv.row(r);
                    check_row_symmetric(h, n).map_err(|source| GraphError::Linalg { node: i, op: "logdet_spd", row: r, source })?;
                    linalg::cholesky_into(h, n, &mut l).map_err(|source| GraphError::Linalg { node: i, op: "logdet_spd", row: r, source })?;
                    out.data_mut()[r] = linalg::logdet_from_factor(&l, n);
                }
            }
            Op::SpdInverse(x) => {
                let xv = self.val(x);
                let n = self.square_rows_dim(x, "spd_inverse")?;
                let mut l = vec![0.0; n * n];
                for r in 0..xv.rows() {
                    linalg::cholesky_into(xv.row(r), n, &mut l).map_err(|source| GraphError::Linalg { node: i, op: "spd_inverse", row: r, source })?;
                    linalg::inverse_from_factor(&l, n, out.row_mut(r));
                }
            }
        }
        Ok(out)
    }
}

fn check_row_symmetric(h: &[f64], n: usize) -> Result<(), LinalgError> {
    let scale = h.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            let dev = (h[i * n + j] - h[j * n + i]).abs();
            if dev > linalg::SYMMETRY_TOL * scale {
                return Err(LinalgError::Asymmetric { row: i, col: j, deviation: dev });
            }
        }
    }
    Ok(())
}

#[inline]
fn broadcast_zip(a: &Tensor, b: &Tensor, out: &mut Tensor, f: impl Fn(f64, f64) -> f64) {
    if a.shape() == b.shape() {
        for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *o = f(*x, *y);
        }
        return;
    }
    let (rows, cols) = out.shape();
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    for r in 0..rows {
        let ra = if ar == 1 { 0 } else { r };
        let rb = if br == 1 { 0 } else { r };
        let arow = a.row(ra);
        let brow = b.row(rb);
        let orow = out.row_mut(r);
        for c in 0..cols {
            let x = if ac == 1 { arow[0] } else { arow[c] };
            let y = if bc == 1 { brow[0] } else { brow[c] };
            orow[c] = f(x, y);
        }
    }
}
