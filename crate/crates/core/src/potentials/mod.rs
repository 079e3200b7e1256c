//! Convex potentials whose input gradients define transport maps.
//!
//! [`StrictPotentialParams`] wraps a PICNN with a positive definite
//! quadratic so that its `x`-gradient is strictly monotone.
//! [`FicnnParams`] is the fully convex counterpart on the conditioning
//! variable, used for joint density estimation.

mod ficnn;
mod picnn;

pub use ficnn::{FicnnDims, FicnnLayer, FicnnLayout};
pub use picnn::{default_context_width, PicnnDims, PicnnLayer, PicnnLayout, PicnnParams};

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, NodeId, Plan};
use crate::error::{CoreError, Result};
use crate::math;
use crate::params::{Constraint, ParamStore, Parameterized};
use crate::tensor::Tensor;

/// Initial `(γ₁, γ₂, γ₃)`; `softplus(0.5413) ≈ 1`.
pub const GAMMA_INIT: [f64; 3] = [0.0, 0.0, 0.5413];

/// A scalar potential convex in its first input, buildable on a graph.
pub trait ConvexPotential: Parameterized {
    /// Dimension of the convex input.
    fn input_dim(&self) -> usize;
    /// Dimension of the context input, 0 when there is none.
    fn context_dim(&self) -> usize;
    /// Builds the `(B, 1)` potential for batched rows `x` and context `y`.
    fn build(&self, g: &mut Graph, ids: &[NodeId], x: NodeId, y: Option<NodeId>) -> Result<NodeId>;
}

fn push_gammas(store: &mut ParamStore, prefix: &str) -> [usize; 3] {
    let mut out = [0; 3];
    for (i, g) in GAMMA_INIT.iter().enumerate() {
        out[i] = store.push(alloc::format!("{prefix}gamma{}", i + 1), Tensor::scalar(*g), Constraint::Free);
    }
    out
}

/// `softplus(γ₁)·core + (relu(γ₂) + softplus(γ₃))·½‖x‖²`.
fn strict_wrap(g: &mut Graph, ids: &[NodeId], gamma: [usize; 3], core: NodeId, x: NodeId) -> Result<NodeId> {
    let c1 = g.softplus(ids[gamma[0]]);
    let r2 = g.relu(ids[gamma[1]]);
    let s3 = g.softplus(ids[gamma[2]]);
    let q = g.add(r2, s3)?;
    let sq = g.square_norm(x);
    let half = g.scale(sq, 0.5);
    let a = g.mul(c1, core)?;
    let b = g.mul(q, half)?;
    Ok(g.add(a, b)?)
}

/// The strictly convex potential `G̃(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictPotentialParams {
    pub picnn: PicnnLayout,
    pub gamma: [usize; 3],
    pub store: ParamStore,
}

impl StrictPotentialParams {
    pub fn init(dims: PicnnDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let picnn = PicnnLayout::init(dims, &mut store, "picnn.", &mut rng)?;
        let gamma = push_gammas(&mut store, "");
        Ok(Self { picnn, gamma, store })
    }

    pub fn dims(&self) -> PicnnDims {
        self.picnn.dims
    }

    pub fn gammas(&self) -> [f64; 3] {
        self.gamma.map(|i| self.store.get(i).item())
    }

    pub fn set_gammas(&mut self, g: [f64; 3]) {
        for (i, v) in self.gamma.iter().zip(g) {
            *self.store.get_mut(*i) = Tensor::scalar(v);
        }
    }

    /// `softplus(γ₁)`.
    pub fn picnn_coefficient(&self) -> f64 {
        math::softplus(self.gammas()[0])
    }

    /// `relu(γ₂) + softplus(γ₃)`, a lower bound on the Hessian spectrum.
    pub fn quadratic_coefficient(&self) -> f64 {
        let g = self.gammas();
        math::relu(g[1]) + math::softplus(g[2])
    }

    /// Sets every PICNN tensor to zero, leaving the gammas.
    pub fn zero_picnn(&mut self) {
        for (i, e) in self.store.entries_mut().iter_mut().enumerate() {
            if !self.gamma.contains(&i) {
                e.value.map_inplace(|_| 0.0);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.picnn.check(&self.store)?;
        for &i in &self.gamma {
            if i >= self.store.len() || self.store.get(i).shape() != (1, 1) {
                return Err(CoreError::invalid("gamma entries must be scalars"));
            }
        }
        Ok(())
    }
}

impl Parameterized for StrictPotentialParams {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ConvexPotential for StrictPotentialParams {
    fn input_dim(&self) -> usize {
        self.picnn.dims.n
    }
    fn context_dim(&self) -> usize {
        self.picnn.dims.m
    }
    fn build(&self, g: &mut Graph, ids: &[NodeId], x: NodeId, y: Option<NodeId>) -> Result<NodeId> {
        let y = y.ok_or_else(|| CoreError::invalid("PICNN potential needs a context input"))?;
        let w = self.picnn.build(g, ids, x, y)?;
        strict_wrap(g, ids, self.gamma, w, x)
    }
}

/// A FICNN on `R^m` plus the same strictly convex quadratic wrapper as
/// [`StrictPotentialParams`]; the wrapped form is what joint training uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FicnnParams {
    pub ficnn: FicnnLayout,
    pub gamma: [usize; 3],
    pub store: ParamStore,
}

impl FicnnParams {
    pub fn init(dims: FicnnDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ficnn = FicnnLayout::init(dims, &mut store, "ficnn.", &mut rng)?;
        let gamma = push_gammas(&mut store, "ficnn.");
        Ok(Self { ficnn, gamma, store })
    }

    pub fn dims(&self) -> FicnnDims {
        self.ficnn.dims
    }

    pub fn set_gammas(&mut self, g: [f64; 3]) {
        for (i, v) in self.gamma.iter().zip(g) {
            *self.store.get_mut(*i) = Tensor::scalar(v);
        }
    }

    pub fn zero_ficnn(&mut self) {
        for (i, e) in self.store.entries_mut().iter_mut().enumerate() {
            if !self.gamma.contains(&i) {
                e.value.map_inplace(|_| 0.0);
            }
        }
    }
}

impl Parameterized for FicnnParams {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ConvexPotential for FicnnParams {
    fn input_dim(&self) -> usize {
        self.ficnn.dims.m
    }
    fn context_dim(&self) -> usize {
        0
    }
    fn build(&self, g: &mut Graph, ids: &[NodeId], x: NodeId, _y: Option<NodeId>) -> Result<NodeId> {
        let s = self.ficnn.build(g, ids, x)?;
        strict_wrap(g, ids, self.gamma, s, x)
    }
}

/// Replaces every non-negative-constrained entry by `max(0, ·)`.
pub fn project_nonneg<P: Parameterized + ?Sized>(params: &mut P) {
    for e in params.store_mut().entries_mut() {
        if e.constraint == Constraint::NonNegative {
            e.value.map_inplace(math::relu);
        }
    }
}

/// A reusable graph computing a potential, its input gradient and,
/// optionally, its per-row input Hessian for a fixed batch size.
pub struct PotentialGraph {
    pub g: Graph,
    pub params: Vec<NodeId>,
    pub x: NodeId,
    pub y: Option<NodeId>,
    pub value: NodeId,
    pub grad: NodeId,
    pub hess: Option<NodeId>,
    batch: usize,
    plan_vg: Plan,
    plan_h: Option<Plan>,
}

impl PotentialGraph {
    pub fn new<P: ConvexPotential + ?Sized>(p: &P, batch: usize, with_hessian: bool) -> Result<Self> {
        let mut g = Graph::new();
        let params = p.store().declare(&mut g, "")?;
        let x = g.input("x", (batch, p.input_dim()))?;
        let y = match p.context_dim() {
            0 => None,
            m => Some(g.input("y", (batch, m))?),
        };
        let value = p.build(&mut g, &params, x, y)?;
        let grad = autodiff::batched_grad(&mut g, value, x)?;
        let hess = if with_hessian { Some(autodiff::hessian_rows(&mut g, grad, x)?) } else { None };
        let plan_vg = g.plan(&[value, grad]);
        let plan_h = hess.map(|h| g.plan(&[h]));
        Ok(Self { g, params, x, y, value, grad, hess, batch, plan_vg, plan_h })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn bind<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>) -> Result<()> {
        p.store().bind(&mut self.g, &self.params)?;
        self.g.bind_from(self.x, x)?;
        match (self.y, y) {
            (Some(id), Some(t)) => self.g.bind_from(id, t)?,
            (None, _) => {}
            (Some(_), None) => return Err(CoreError::invalid("missing context input")),
        }
        Ok(())
    }

    /// Rows of the potential and of its input gradient.
    pub fn value_grad<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>) -> Result<(&Tensor, &Tensor)> {
        self.bind(p, x, y)?;
        self.g.run(&self.plan_vg)?;
        Ok((self.g.value(self.value), self.g.value(self.grad)))
    }

    /// Row-major per-sample Hessians, shape `(B, n·n)`.
    pub fn hessian<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>) -> Result<&Tensor> {
        let (Some(h), Some(plan)) = (self.hess, self.plan_h.take()) else {
            return Err(CoreError::invalid("graph was built without a Hessian"));
        };
        let res = self.bind(p, x, y).and_then(|_| Ok(self.g.run(&plan)?));
        self.plan_h = Some(plan);
        res?;
        Ok(self.g.value(h))
    }
}

/// `w_K` for each row of `(x, y)`.
pub fn picnn_forward(params: &PicnnParams, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = params.store.declare(&mut g, "")?;
    let xi = g.input("x", x.shape())?;
    let yi = g.input("y", y.shape())?;
    let out = params.layout.build(&mut g, &ids, xi, yi)?;
    params.store.bind(&mut g, &ids)?;
    g.bind_id(xi, x.clone())?;
    g.bind_id(yi, y.clone())?;
    g.evaluate(&[out])?;
    Ok(g.value(out).clone())
}

fn one_shot<P: ConvexPotential + ?Sized>(p: &P, x: &Tensor, y: Option<&Tensor>, hessian: bool) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let mut pg = PotentialGraph::new(p, x.rows(), hessian)?;
    let (v, gr) = pg.value_grad(p, x, y)?;
    let (v, gr) = (v.clone(), gr.clone());
    let h = if hessian { Some(pg.hessian(p, x, y)?.clone()) } else { None };
    Ok((v, gr, h))
}

/// `G̃` for each row of `(x, y)`, shape `(B, 1)`.
pub fn strict_potential(params: &StrictPotentialParams, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(one_shot(params, x, Some(y), false)?.0)
}

/// `∇ₓG̃`, the inverse map `g⁻¹(x; y)`, shape `(B, n)`.
pub fn potential_grad_x(params: &StrictPotentialParams, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(one_shot(params, x, Some(y), false)?.1)
}

/// `∇ₓ²G̃` for each row, as `n x n` matrices.
pub fn potential_hessian_x(params: &StrictPotentialParams, x: &Tensor, y: &Tensor) -> Result<Vec<Tensor>> {
    let n = params.input_dim();
    let h = one_shot(params, x, Some(y), true)?.2.unwrap_or_else(|| Tensor::zeros(0, 0));
    Ok((0..h.rows()).map(|r| Tensor::from_vec(n, n, h.row(r).to_vec())).collect())
}

/// Raw FICNN output `s_K` for each row of `y`, without the quadratic term.
pub fn ficnn_forward(params: &FicnnParams, y: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = params.store.declare(&mut g, "")?;
    let yi = g.input("y", y.shape())?;
    let out = params.ficnn.build(&mut g, &ids, yi)?;
    params.store.bind(&mut g, &ids)?;
    g.bind_id(yi, y.clone())?;
    g.evaluate(&[out])?;
    Ok(g.value(out).clone())
}

/// Gradient and Hessians of any convex potential, for callers that do not
/// keep a [`PotentialGraph`].
pub fn grad_and_hessian<P: ConvexPotential + ?Sized>(p: &P, x: &Tensor, y: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let (_, g, h) = one_shot(p, x, y, true)?;
    Ok((g, h.unwrap_or_else(|| Tensor::zeros(0, 0))))
}

#[cfg(test)]
mod tests;
