//! Tape-based differentiation: reverse mode, forward mode, and their
//! composition for exact Hessians.

mod graph;

pub use graph::{Graph, GraphError, NodeId, Op, Plan, Unary};

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// A primal value paired with a tangent of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBundle {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl TangentBundle {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self, GraphError> {
        if primal.shape() != tangent.shape() {
            return Err(GraphError::Shape { node: usize::MAX, op: "tangent bundle", lhs: primal.shape(), rhs: tangent.shape() });
        }
        Ok(Self { primal, tangent })
    }
}

/// Pushes a tangent at input `input` forward to `output`. All other inputs
/// must already be bound.
pub fn push_forward(g: &mut Graph, output: NodeId, input: NodeId, at: &TangentBundle) -> Result<TangentBundle, GraphError> {
    g.bind_id(input, at.primal.clone())?;
    let dir = g.input("__tangent", g.shape(input))?;
    g.bind_id(dir, at.tangent.clone())?;
    let t = g.jvp(&[output], &[(input, dir)])?[0];
    let mut targets = alloc::vec![output];
    targets.extend(t);
    g.evaluate(&targets)?;
    let primal = g.value(output).clone();
    let tangent = match t {
        Some(t) => g.value(t).clone(),
        None => Tensor::zeros(primal.rows(), primal.cols()),
    };
    Ok(TangentBundle { primal, tangent })
}

/// Hessian-vector product `∇²f(x) v` of a scalar root, computed as the
/// forward-mode derivative of the reverse-mode gradient. Every input other
/// than `x` must already be bound.
pub fn hvp(g: &mut Graph, root: NodeId, x: NodeId, x_value: &Tensor, v: &Tensor) -> Result<Tensor, GraphError> {
    let rs = g.shape(root);
    if rs != (1, 1) {
        return Err(GraphError::NonScalarRoot { shape: rs });
    }
    let Some(gx) = g.grad(root, &[x])?[0] else {
        return Ok(Tensor::zeros(v.rows(), v.cols()));
    };
    let bundle = TangentBundle::new(x_value.clone(), v.clone())?;
    Ok(push_forward(g, gx, x, &bundle)?.tangent)
}

/// Builds the per-row Hessian of a batched function.
///
/// `grad` is the gradient of `Σ_rows f` with respect to the batched input
/// `x` of shape `(B, n)`; since rows are independent, row `b` of `grad` is
/// `∇f(x_b)`. The result has shape `(B, n·n)` with row `b` holding the
/// row-major Hessian of sample `b`, assembled from `n` Hessian-vector
/// products along the unit directions.
pub fn hessian_rows(g: &mut Graph, grad: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
    let (rows, n) = g.shape(x);
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let e = g.constant(Tensor::from_fn(rows, n, |_, c| if c == j { 1.0 } else { 0.0 }));
        let col = g.jvp(&[grad], &[(x, e)])?[0];
        let col = match col {
            Some(c) => c,
            None => g.constant(Tensor::zeros(rows, n)),
        };
        cols.push(col);
    }
    // Column j of a symmetric Hessian equals row j.
    g.concat(&cols)
}

/// Gradient node of `Σ_rows f` with respect to `x`, or a zero constant.
pub fn batched_grad(g: &mut Graph, f_rows: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
    let total = g.sum(f_rows);
    Ok(match g.grad(total, &[x])?[0] {
        Some(id) => id,
        None => {
            let (r, c) = g.shape(x);
            g.constant(Tensor::zeros(r, c))
        }
    })
}
