//! Dynamic conditional transport: a flow driven by the gradient of a learned
//! value function `Φ(t, x; y)`, trained by maximum likelihood through an
//! unrolled RK4 discretization with transport-cost and HJB penalties.
//!
//! The inverse map integrates `dp/dt = -(1/α₁)∇ₚΦ` from `t = 1` (data) to
//! `t = 0` (reference), accumulating the log-determinant, the transport
//! cost and the HJB residual with the same RK4 stages. Sampling integrates
//! the same field forward from `t = 0`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, GraphError, NodeId, Plan, Unary};
use crate::error::{CoreError, Result};
use crate::math::{self, LN_2PI};
use crate::params::{glorot_uniform, Constraint, ParamStore, Parameterized};
use crate::tensor::Tensor;
use crate::train::{minibatch_adam, LoopConfig, Objective, TrainReport};

/// Box bound on the residual-network weights.
pub const NN_BOX: f64 = 1.5;

const A: usize = 0;
const A0: usize = 1;
const B0: usize = 2;
const A1: usize = 3;
const B1: usize = 4;
const QA: usize = 5;
const QB: usize = 6;
const QC: usize = 7;
const EMBED: usize = 8;

/// Context embedding `W₃ tanh(W₂ tanh(W₁y + b₁) + b₂) + b₃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedDims {
    pub hidden: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhiDims {
    /// Transported dimension.
    pub n: usize,
    /// Raw context dimension, 0 for an unconditional flow.
    pub m: usize,
    pub width: usize,
    /// Rank of the quadratic term.
    pub rank: usize,
    pub embed: Option<EmbedDims>,
}

impl PhiDims {
    /// Default rank `min(10, n + m' + 1)` where `m'` is the context width
    /// seen by `Φ`.
    pub fn new(n: usize, m: usize, width: usize, embed: Option<EmbedDims>) -> Self {
        let mut d = Self { n, m, width, rank: 0, embed };
        d.rank = d.q_dim().min(10);
        d
    }

    /// Context width after the optional embedding.
    pub fn context(&self) -> usize {
        match self.embed {
            Some(e) if self.m > 0 => e.output,
            _ => self.m,
        }
    }

    /// Length of `q = (t, x, y)`.
    pub fn q_dim(&self) -> usize {
        1 + self.n + self.context()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.width == 0 || self.rank == 0 {
            return Err(CoreError::invalid("flow dimensions n, width and rank must be positive"));
        }
        if self.rank > self.q_dim() {
            return Err(CoreError::invalid("quadratic rank exceeds n + m + 1"));
        }
        if let Some(e) = self.embed {
            if self.m > 0 && (e.hidden == 0 || e.output == 0) {
                return Err(CoreError::invalid("embedding widths must be positive"));
            }
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(&'static str, (usize, usize), Constraint)> {
        let (w, d, r) = (self.width, self.q_dim(), self.rank);
        let bx = Constraint::Box(NN_BOX);
        let mut out = vec![
            ("a", (1, w), bx),
            ("A0", (w, d), bx),
            ("b0", (1, w), bx),
            ("A1", (w, w), bx),
            ("b1", (1, w), bx),
            ("quad.A", (d, r), Constraint::Free),
            ("quad.b", (1, d), Constraint::Free),
            ("quad.c", (1, 1), Constraint::Free),
        ];
        if let (Some(e), true) = (self.embed, self.m > 0) {
            out.extend([
                ("embed.W1", (e.hidden, self.m), Constraint::Free),
                ("embed.b1", (1, e.hidden), Constraint::Free),
                ("embed.W2", (e.hidden, e.hidden), Constraint::Free),
                ("embed.b2", (1, e.hidden), Constraint::Free),
                ("embed.W3", (e.output, e.hidden), Constraint::Free),
                ("embed.b3", (1, e.output), Constraint::Free),
            ]);
        }
        out
    }
}

/// Value-function weights plus the penalty weights the flow was trained
/// with; `α₁` also scales the velocity field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiParams {
    pub dims: PhiDims,
    pub alpha1: f64,
    pub alpha2: f64,
    pub store: ParamStore,
}

impl Parameterized for PhiParams {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl PhiParams {
    /// Glorot-uniform network matrices, zero biases, `a = 0`, zero linear
    /// and constant quadratic terms, and a quadratic factor scaled by
    /// `0.1·√α₁` so that the initial velocity is small whatever `α₁` is.
    pub fn init(dims: PhiDims, alpha1: f64, alpha2: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        check_alphas(alpha1, alpha2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, (name, (r, c), constraint)) in dims.shapes().into_iter().enumerate() {
            let value = match i {
                A0 | A1 => glorot_uniform(&mut rng, r, c, false),
                QA => glorot_uniform(&mut rng, r, c, false).scale(0.1 * math::sqrt(alpha1)),
                A | B0 | B1 | QB | QC => Tensor::zeros(r, c),
                _ if name.contains(".W") => glorot_uniform(&mut rng, r, c, false),
                _ => Tensor::zeros(r, c),
            };
            store.push(name, value, constraint);
        }
        store.project();
        Ok(Self { dims, alpha1, alpha2, store })
    }

    /// Every weight zero: `Φ ≡ 0` and the flow is the identity.
    pub fn zeros(dims: PhiDims, alpha1: f64, alpha2: f64) -> Result<Self> {
        let mut p = Self::init(dims, alpha1, alpha2, 0)?;
        for e in p.store.entries_mut() {
            e.value.map_inplace(|_| 0.0);
        }
        Ok(p)
    }

    /// Replaces the quadratic term `½qᵀAAᵀq + bᵀq + c`.
    pub fn set_quadratic(&mut self, a: Tensor, b: Tensor, c: f64) -> Result<()> {
        let d = self.dims.q_dim();
        if a.rows() != d || b.shape() != (1, d) {
            return Err(CoreError::invalid("quadratic term has the wrong shape"));
        }
        self.dims.rank = a.cols();
        self.dims.validate()?;
        *self.store.get_mut(QA) = a;
        *self.store.get_mut(QB) = b;
        *self.store.get_mut(QC) = Tensor::scalar(c);
        Ok(())
    }

    /// Largest absolute residual-network weight.
    pub fn nn_max_abs(&self) -> f64 {
        self.store.max_abs_where(|c| matches!(c, Constraint::Box(_)))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        check_alphas(self.alpha1, self.alpha2)?;
        let shapes = self.dims.shapes();
        if shapes.len() != self.store.len() {
            return Err(CoreError::invalid("flow parameter count does not match its dimensions"));
        }
        for (i, (name, shape, _)) in shapes.iter().enumerate() {
            if self.store.get(i).shape() != *shape {
                return Err(CoreError::invalid(alloc::format!("flow parameter {name} has the wrong shape")));
            }
        }
        Ok(())
    }

    fn has_embedding(&self) -> bool {
        self.store.len() > EMBED
    }

    fn embed_graph(&self, g: &mut Graph, ids: &[NodeId], y: NodeId) -> Result<NodeId> {
        if !self.has_embedding() {
            return Ok(y);
        }
        let mut h = y;
        for layer in 0..3 {
            let w = ids[EMBED + 2 * layer];
            let b = ids[EMBED + 2 * layer + 1];
            let z = g.linear(h, w)?;
            h = g.add(z, b)?;
            if layer < 2 {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// `Φ(q)` per row, `(B, 1)`.
    fn phi_graph(&self, g: &mut Graph, ids: &[NodeId], q: NodeId) -> Result<NodeId> {
        let z0 = g.linear(q, ids[A0])?;
        let z0 = g.add(z0, ids[B0])?;
        let h0 = g.unary(Unary::LogCosh, z0);
        let z1 = g.linear(h0, ids[A1])?;
        let z1 = g.add(z1, ids[B1])?;
        let s1 = g.unary(Unary::LogCosh, z1);
        let h1 = g.add(h0, s1)?;
        let nn = g.linear(h1, ids[A])?;
        let qa = g.matmul(q, ids[QA])?;
        let sq = g.square_norm(qa);
        let quad = g.scale(sq, 0.5);
        let lin = g.linear(q, ids[QB])?;
        let out = g.add(nn, quad)?;
        let out = g.add(out, lin)?;
        Ok(g.add(out, ids[QC])?)
    }

    /// Builds `q = (t, p, y)` and returns `(q, Φ, ∇_qΦ)`.
    fn stage(&self, g: &mut Graph, ids: &[NodeId], t: f64, p: NodeId, y: Option<NodeId>) -> Result<(NodeId, NodeId, NodeId)> {
        let rows = g.shape(p).0;
        let tc = g.constant(Tensor::filled(rows, 1, t));
        let q = match y {
            Some(y) => g.concat(&[tc, p, y])?,
            None => g.concat(&[tc, p])?,
        };
        let phi = self.phi_graph(g, ids, q)?;
        let gq = autodiff::batched_grad(g, phi, q)?;
        Ok((q, phi, gq))
    }

    /// `ΔₚΦ` per row from `n` forward-mode derivatives of `∇_qΦ`.
    fn laplacian_graph(&self, g: &mut Graph, q: NodeId, gq: NodeId) -> Result<NodeId> {
        let (rows, d) = g.shape(q);
        let mut total: Option<NodeId> = None;
        for j in 0..self.dims.n {
            let c = 1 + j;
            let e = g.constant(Tensor::from_fn(rows, d, |_, k| if k == c { 1.0 } else { 0.0 }));
            let Some(col) = g.jvp(&[gq], &[(q, e)])?[0] else { continue };
            let diag = g.slice_cols(col, c, 1)?;
            total = Some(match total {
                Some(t) => g.add(t, diag)?,
                None => diag,
            });
        }
        Ok(match total {
            Some(t) => t,
            None => g.constant(Tensor::zeros(rows, 1)),
        })
    }
}

fn check_alphas(alpha1: f64, alpha2: f64) -> Result<()> {
    if !(alpha1 > 0.0) || !alpha1.is_finite() {
        return Err(CoreError::invalid("alpha1 must be positive"));
    }
    if !(alpha2 >= 0.0) || !alpha2.is_finite() {
        return Err(CoreError::invalid("alpha2 must be non-negative"));
    }
    Ok(())
}

fn check_nt(nt: usize) -> Result<()> {
    if nt == 0 {
        return Err(CoreError::invalid("nt must be at least 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub nt: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub width: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Context embedding `(hidden, output)` widths; absent means `y` is
    /// used as is.
    pub embed: Option<(usize, usize)>,
    pub val_interval: usize,
    pub patience: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            nt: 8,
            alpha1: 10.0,
            alpha2: 10.0,
            width: 32,
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 50,
            seed: 0,
            embed: None,
            val_interval: 0,
            patience: 10,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        check_nt(self.nt)?;
        check_alphas(self.alpha1, self.alpha2)?;
        if self.width == 0 {
            return Err(CoreError::invalid("width must be at least 1"));
        }
        Ok(())
    }

    pub fn dims(&self, n: usize, m: usize) -> PhiDims {
        let embed = self.embed.map(|(hidden, output)| EmbedDims { hidden, output });
        PhiDims::new(n, m, self.width, embed)
    }

    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed: self.seed,
            val_interval: self.val_interval,
            patience: self.patience,
        }
    }
}

/// `Φ` and its derivatives at a batch of points.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiEval {
    pub value: Tensor,
    pub grad_x: Tensor,
    pub laplacian: Tensor,
    pub dt: Tensor,
}

fn check_rows(params: &PhiParams, x: &Tensor, y: Option<&Tensor>) -> Result<()> {
    params.validate()?;
    if x.cols() != params.dims.n {
        return Err(CoreError::invalid(alloc::format!("expected {} state columns, got {}", params.dims.n, x.cols())));
    }
    match (params.dims.m, y) {
        (0, None) => Ok(()),
        (0, Some(_)) => Err(CoreError::invalid("this flow takes no context")),
        (_, None) => Err(CoreError::invalid("missing context input")),
        (m, Some(y)) if y.cols() != m || y.rows() != x.rows() => {
            Err(CoreError::invalid(alloc::format!("context must be {} x {m}, got {:?}", x.rows(), y.shape())))
        }
        _ => Ok(()),
    }
}

struct Inputs {
    params: Vec<NodeId>,
    x: NodeId,
    y: Option<NodeId>,
    y_emb: Option<NodeId>,
}

fn declare(g: &mut Graph, p: &PhiParams, batch: usize) -> Result<Inputs> {
    let params = p.store.declare(g, "")?;
    let x = g.input("x", (batch, p.dims.n))?;
    let (y, y_emb) = match p.dims.m {
        0 => (None, None),
        m => {
            let y = g.input("y", (batch, m))?;
            (Some(y), Some(p.embed_graph(g, &params, y)?))
        }
    };
    Ok(Inputs { params, x, y, y_emb })
}

fn bind(g: &mut Graph, inp: &Inputs, p: &PhiParams, x: &Tensor, y: Option<&Tensor>) -> Result<()> {
    p.store.bind(g, &inp.params)?;
    g.bind_from(inp.x, x)?;
    if let (Some(id), Some(t)) = (inp.y, y) {
        g.bind_from(id, t)?;
    }
    Ok(())
}

/// `Φ`, `∇ₓΦ`, `ΔₓΦ` and `∂ₜΦ` at time `t` for each row of `(x, y)`.
pub fn phi_eval(params: &PhiParams, t: f64, x: &Tensor, y: Option<&Tensor>) -> Result<PhiEval> {
    check_rows(params, x, y)?;
    let mut g = Graph::new();
    let inp = declare(&mut g, params, x.rows())?;
    let (q, value, gq) = params.stage(&mut g, &inp.params, t, inp.x, inp.y_emb)?;
    let grad_x = g.slice_cols(gq, 1, params.dims.n)?;
    let dt = g.slice_cols(gq, 0, 1)?;
    let lap = params.laplacian_graph(&mut g, q, gq)?;
    bind(&mut g, &inp, params, x, y)?;
    g.evaluate(&[value, grad_x, dt, lap])?;
    Ok(PhiEval { value: g.value(value).clone(), grad_x: g.value(grad_x).clone(), laplacian: g.value(lap).clone(), dt: g.value(dt).clone() })
}

/// The context embedding applied to raw rows `y`; the identity when the
/// flow has no embedding.
pub fn embed_context(params: &PhiParams, y: &Tensor) -> Result<Tensor> {
    params.validate()?;
    if y.cols() != params.dims.m {
        return Err(CoreError::invalid(alloc::format!("expected {} context columns, got {}", params.dims.m, y.cols())));
    }
    if !params.has_embedding() {
        return Ok(y.clone());
    }
    let mut g = Graph::new();
    let ids = params.store.declare(&mut g, "")?;
    let yi = g.input("y", y.shape())?;
    let out = params.embed_graph(&mut g, &ids, yi)?;
    params.store.bind(&mut g, &ids)?;
    g.bind_id(yi, y.clone())?;
    g.evaluate(&[out])?;
    Ok(g.value(out).clone())
}

/// The inverse-flow state at `t = 0` for each row.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    /// `p(0)`, `(B, n)`.
    pub p: Tensor,
    /// `∫ (1/α₁)ΔΦ dt`, the log-determinant of the inverse map's Jacobian.
    pub ell: Tensor,
    /// `∫ ½‖(1/α₁)∇Φ‖² dt`.
    pub cost: Tensor,
    /// `∫ |∂ₜΦ − (1/2α₁)‖∇Φ‖²| dt`.
    pub hjb: Tensor,
}

/// Batch means of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CotTerms {
    /// `½‖p(0)‖² − ℓ`, without the Gaussian normalizing constant.
    pub nll: f64,
    pub cost: f64,
    pub hjb: f64,
}

impl CotTerms {
    pub fn loss(&self, alpha1: f64, alpha2: f64) -> f64 {
        self.nll + alpha1 * self.cost + alpha2 * self.hjb
    }
}

/// The unrolled inverse flow for a fixed batch size and step count, with
/// optional parameter gradients of the training loss.
pub struct InverseGraph {
    g: Graph,
    inp: Inputs,
    p0: NodeId,
    ell: NodeId,
    cost: NodeId,
    hjb: NodeId,
    rows: NodeId,
    means: [NodeId; 3],
    loss: NodeId,
    grads: Vec<NodeId>,
    step_starts: Vec<usize>,
    state_end: usize,
    plan_state: Plan,
    plan_terms: Plan,
    plan_train: Option<Plan>,
    alphas: (f64, f64),
}

fn weighted(g: &mut Graph, parts: &[NodeId; 4], h: f64) -> Result<NodeId> {
    let mid = g.add(parts[1], parts[2])?;
    let mid = g.scale(mid, 2.0);
    let s = g.add(parts[0], mid)?;
    let s = g.add(s, parts[3])?;
    Ok(g.scale(s, h / 6.0))
}

fn accumulate(g: &mut Graph, acc: NodeId, inc: NodeId) -> Result<NodeId> {
    Ok(g.add(acc, inc)?)
}

impl InverseGraph {
    pub fn new(p: &PhiParams, batch: usize, nt: usize, with_grad: bool) -> Result<Self> {
        p.validate()?;
        check_nt(nt)?;
        let mut g = Graph::new();
        let inp = declare(&mut g, p, batch)?;
        let ids = inp.params.clone();
        let n = p.dims.n;
        let inv_a = 1.0 / p.alpha1;
        let h = 1.0 / nt as f64;
        let mut state = inp.x;
        let zero = g.constant(Tensor::zeros(batch, 1));
        let (mut ell, mut cost, mut hjb) = (zero, zero, zero);
        let mut step_starts = Vec::with_capacity(nt);
        for k in 0..nt {
            step_starts.push(g.len());
            let t = 1.0 - k as f64 * h;
            let mut vel = [zero; 4];
            let mut d_ell = [zero; 4];
            let mut d_cost = [zero; 4];
            let mut d_hjb = [zero; 4];
            for s in 0..4 {
                let (ts, ps) = match s {
                    0 => (t, state),
                    1 | 2 => {
                        let step = g.scale(vel[s - 1], 0.5 * h);
                        (t - 0.5 * h, g.add(state, step)?)
                    }
                    _ => {
                        let step = g.scale(vel[2], h);
                        (t - h, g.add(state, step)?)
                    }
                };
                let (q, _, gq) = p.stage(&mut g, &ids, ts, ps, inp.y_emb)?;
                let gx = g.slice_cols(gq, 1, n)?;
                let dt = g.slice_cols(gq, 0, 1)?;
                // Reversed time: dp/ds = (1/α₁)∇Φ.
                vel[s] = g.scale(gx, inv_a);
                let lap = p.laplacian_graph(&mut g, q, gq)?;
                d_ell[s] = g.scale(lap, inv_a);
                let sq = g.square_norm(gx);
                d_cost[s] = g.scale(sq, 0.5 * inv_a * inv_a);
                let half = g.scale(sq, 0.5 * inv_a);
                let res = g.sub(dt, half)?;
                d_hjb[s] = g.unary(Unary::Abs, res);
            }
            let dp = weighted(&mut g, &vel, h)?;
            state = g.add(state, dp)?;
            let inc = weighted(&mut g, &d_ell, h)?;
            ell = accumulate(&mut g, ell, inc)?;
            let inc = weighted(&mut g, &d_cost, h)?;
            cost = accumulate(&mut g, cost, inc)?;
            let inc = weighted(&mut g, &d_hjb, h)?;
            hjb = accumulate(&mut g, hjb, inc)?;
        }
        let state_end = g.len();
        let sq = g.square_norm(state);
        let half = g.scale(sq, 0.5);
        let rows = g.sub(half, ell)?;
        let means = [g.mean(rows), g.mean(cost), g.mean(hjb)];
        let c = g.scale(means[1], p.alpha1);
        let hj = g.scale(means[2], p.alpha2);
        let loss = g.add(means[0], c)?;
        let loss = g.add(loss, hj)?;
        let mut grads = Vec::new();
        if with_grad {
            for (i, d) in g.grad(loss, &ids)?.into_iter().enumerate() {
                grads.push(match d {
                    Some(d) => d,
                    None => {
                        let (r, c) = p.store.get(i).shape();
                        g.constant(Tensor::zeros(r, c))
                    }
                });
            }
        }
        let plan_state = g.plan(&[state, ell, cost, hjb]);
        let plan_terms = g.plan(&[rows, means[0], means[1], means[2]]);
        let plan_train = with_grad.then(|| {
            let mut targets = vec![loss, means[0], means[1], means[2]];
            targets.extend_from_slice(&grads);
            g.plan(&targets)
        });
        Ok(Self {
            g,
            inp,
            p0: state,
            ell,
            cost,
            hjb,
            rows,
            means,
            loss,
            grads,
            step_starts,
            state_end,
            plan_state,
            plan_terms,
            plan_train,
            alphas: (p.alpha1, p.alpha2),
        })
    }

    fn check_alphas(&self, p: &PhiParams) -> Result<()> {
        if self.alphas != (p.alpha1, p.alpha2) {
            return Err(CoreError::invalid("graph was built for different penalty weights"));
        }
        Ok(())
    }

    fn run(&mut self, which: u8, p: &PhiParams, x: &Tensor, y: Option<&Tensor>) -> Result<()> {
        self.check_alphas(p)?;
        bind(&mut self.g, &self.inp, p, x, y)?;
        let plan = match which {
            0 => &self.plan_state,
            1 => &self.plan_terms,
            _ => self.plan_train.as_ref().ok_or_else(|| CoreError::invalid("graph was built without gradients"))?,
        };
        match self.g.run(plan) {
            Ok(()) => Ok(()),
            Err(GraphError::NonFinite { node, .. }) if node < self.state_end => {
                let step = self.step_starts.iter().rposition(|&s| s <= node).unwrap_or(0);
                Err(CoreError::NonFinite { what: "inverse flow state", step })
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn state(&mut self, p: &PhiParams, x: &Tensor, y: Option<&Tensor>) -> Result<AugmentedState> {
        self.run(0, p, x, y)?;
        let v = |id| self.g.value(id).clone();
        Ok(AugmentedState { p: v(self.p0), ell: v(self.ell), cost: v(self.cost), hjb: v(self.hjb) })
    }

    /// Per-row `½‖p(0)‖² − ℓ` and the batch means of the three terms.
    pub fn terms(&mut self, p: &PhiParams, x: &Tensor, y: Option<&Tensor>) -> Result<(Tensor, CotTerms)> {
        self.run(1, p, x, y)?;
        let m = self.means.map(|id| self.g.value(id).item());
        Ok((self.g.value(self.rows).clone(), CotTerms { nll: m[0], cost: m[1], hjb: m[2] }))
    }

    /// Training loss, its terms, and the gradient per parameter tensor.
    pub fn loss_and_grad(&mut self, p: &PhiParams, x: &Tensor, y: Option<&Tensor>) -> Result<(f64, CotTerms, Vec<Tensor>)> {
        self.run(2, p, x, y)?;
        let m = self.means.map(|id| self.g.value(id).item());
        let grads = self.grads.iter().map(|&id| self.g.value(id).clone()).collect();
        Ok((self.g.value(self.loss).item(), CotTerms { nll: m[0], cost: m[1], hjb: m[2] }, grads))
    }
}

/// The forward flow `z ↦ x` for a fixed batch size and step count.
pub struct ForwardGraph {
    g: Graph,
    inp: Inputs,
    out: NodeId,
    step_starts: Vec<usize>,
    plan: Plan,
    alpha1: f64,
}

impl ForwardGraph {
    pub fn new(p: &PhiParams, batch: usize, nt: usize) -> Result<Self> {
        p.validate()?;
        check_nt(nt)?;
        let mut g = Graph::new();
        let inp = declare(&mut g, p, batch)?;
        let ids = inp.params.clone();
        let n = p.dims.n;
        let h = 1.0 / nt as f64;
        let neg_inv_a = -1.0 / p.alpha1;
        let mut state = inp.x;
        let mut step_starts = Vec::with_capacity(nt);
        for k in 0..nt {
            step_starts.push(g.len());
            let t = k as f64 * h;
            let mut vel = [state; 4];
            for s in 0..4 {
                let (ts, ps) = match s {
                    0 => (t, state),
                    1 | 2 => {
                        let step = g.scale(vel[s - 1], 0.5 * h);
                        (t + 0.5 * h, g.add(state, step)?)
                    }
                    _ => {
                        let step = g.scale(vel[2], h);
                        (t + h, g.add(state, step)?)
                    }
                };
                let (_, _, gq) = p.stage(&mut g, &ids, ts, ps, inp.y_emb)?;
                let gx = g.slice_cols(gq, 1, n)?;
                vel[s] = g.scale(gx, neg_inv_a);
            }
            let dp = weighted(&mut g, &vel, h)?;
            state = g.add(state, dp)?;
        }
        let plan = g.plan(&[state]);
        Ok(Self { g, inp, out: state, step_starts, plan, alpha1: p.alpha1 })
    }

    pub fn run(&mut self, p: &PhiParams, z: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        if p.alpha1 != self.alpha1 {
            return Err(CoreError::invalid("graph was built for a different alpha1"));
        }
        bind(&mut self.g, &self.inp, p, z, y)?;
        match self.g.run(&self.plan) {
            Ok(()) => Ok(self.g.value(self.out).clone()),
            Err(GraphError::NonFinite { node, .. }) => {
                let step = self.step_starts.iter().rposition(|&s| s <= node).unwrap_or(0);
                Err(CoreError::NonFinite { what: "forward flow state", step })
            }
            Err(e) => Err(e.into()),
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// Inverse and forward graphs keyed by `(batch, nt)`.
#[derive(Default)]
pub struct FlowCache {
    inverse: BTreeMap<(usize, usize, bool), InverseGraph>,
    forward: BTreeMap<(usize, usize), ForwardGraph>,
}

impl FlowCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inverse(&mut self, p: &PhiParams, batch: usize, nt: usize, with_grad: bool) -> Result<&mut InverseGraph> {
        let key = (batch, nt, with_grad);
        if self.inverse.get(&key).is_some_and(|g| g.alphas != (p.alpha1, p.alpha2)) {
            self.inverse.remove(&key);
        }
        if !self.inverse.contains_key(&key) {
            self.inverse.insert(key, InverseGraph::new(p, batch, nt, with_grad)?);
        }
        Ok(self.inverse.get_mut(&key).expect("inserted above"))
    }

    pub fn forward(&mut self, p: &PhiParams, batch: usize, nt: usize) -> Result<&mut ForwardGraph> {
        let key = (batch, nt);
        if self.forward.get(&key).is_some_and(|g| g.alpha1 != p.alpha1) {
            self.forward.remove(&key);
        }
        if !self.forward.contains_key(&key) {
            self.forward.insert(key, ForwardGraph::new(p, batch, nt)?);
        }
        Ok(self.forward.get_mut(&key).expect("inserted above"))
    }

    /// Per-row `½‖p(0)‖² − ℓ` and the row-weighted means of the terms.
    pub fn terms(&mut self, p: &PhiParams, x: &Tensor, y: Option<&Tensor>, nt: usize) -> Result<(Vec<f64>, CotTerms)> {
        check_rows(p, x, y)?;
        let n = x.rows();
        let mut rows = Vec::with_capacity(n);
        let mut sums = CotTerms { nll: 0.0, cost: 0.0, hjb: 0.0 };
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            let xb = x.slice_rows(start, len);
            let yb = y.map(|t| t.slice_rows(start, len));
            let (r, t) = self.inverse(p, len, nt, false)?.terms(p, &xb, yb.as_ref())?;
            rows.extend_from_slice(r.data());
            let w = len as f64;
            sums.nll += w * t.nll;
            sums.cost += w * t.cost;
            sums.hjb += w * t.hjb;
            start += len;
        }
        let w = n.max(1) as f64;
        Ok((rows, CotTerms { nll: sums.nll / w, cost: sums.cost / w, hjb: sums.hjb / w }))
    }

    /// Forward flow of every row of `z`, in chunks.
    pub fn sample(&mut self, p: &PhiParams, z: &Tensor, y: Option<&Tensor>, nt: usize) -> Result<Tensor> {
        check_rows(p, z, y)?;
        let n = z.rows();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            let zb = z.slice_rows(start, len);
            let yb = y.map(|t| t.slice_rows(start, len));
            parts.push(self.forward(p, len, nt)?.run(p, &zb, yb.as_ref())?);
            start += len;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(if refs.is_empty() { Tensor::zeros(0, p.dims.n) } else { Tensor::vcat(&refs) })
    }
}

/// Integrates the inverse flow from `t = 1` to `t = 0` in `nt` RK4 steps.
pub fn integrate_inverse(params: &PhiParams, x: &Tensor, y: Option<&Tensor>, nt: usize) -> Result<AugmentedState> {
    check_rows(params, x, y)?;
    InverseGraph::new(params, x.rows(), nt, false)?.state(params, x, y)
}

/// Batch means of the objective terms.
pub fn cot_terms(params: &PhiParams, x: &Tensor, y: Option<&Tensor>, nt: usize) -> Result<CotTerms> {
    Ok(FlowCache::new().terms(params, x, y, nt)?.1)
}

/// `mean[½‖p(0)‖² − ℓ] + α₁·cost + α₂·hjb` with the penalty weights stored
/// in `params`.
pub fn cot_loss(params: &PhiParams, x: &Tensor, y: Option<&Tensor>, nt: usize) -> Result<f64> {
    Ok(cot_terms(params, x, y, nt)?.loss(params.alpha1, params.alpha2))
}

/// Per-sample negative log-likelihood of the discretized flow, including
/// the Gaussian normalizing constant.
pub fn nll_per_sample(params: &PhiParams, x: &Tensor, y: Option<&Tensor>, nt: usize) -> Result<Vec<f64>> {
    let c = 0.5 * params.dims.n as f64 * LN_2PI;
    Ok(FlowCache::new().terms(params, x, y, nt)?.0.into_iter().map(|v| v + c).collect())
}

/// Pushes reference draws `z` through the forward flow. `y` holds either
/// one row per draw or a single row shared by all draws.
pub fn sample_flow(params: &PhiParams, y: Option<&Tensor>, z: &Tensor, nt: usize) -> Result<Tensor> {
    let y = expand_context(y, z.rows());
    FlowCache::new().sample(params, z, y.as_ref(), nt)
}

fn expand_context(y: Option<&Tensor>, rows: usize) -> Option<Tensor> {
    y.map(|y| if y.rows() == 1 && rows != 1 { Tensor::from_fn(rows, y.cols(), |_, c| y[(0, c)]) } else { y.clone() })
}

/// `‖X_nt − X_ref‖_F / ‖X_ref‖_F` for each `nt`, all from the same draws.
pub fn nt_consistency(params: &PhiParams, y: Option<&Tensor>, z: &Tensor, nt_list: &[usize], nt_ref: usize) -> Result<Vec<f64>> {
    let y = expand_context(y, z.rows());
    let mut cache = FlowCache::new();
    let reference = cache.sample(params, z, y.as_ref(), nt_ref)?;
    let denom = reference.frobenius();
    nt_list
        .iter()
        .map(|&nt| {
            let x = cache.sample(params, z, y.as_ref(), nt)?;
            let diff = x.sub(&reference).frobenius();
            Ok(if denom > 0.0 { diff / denom } else { diff })
        })
        .collect()
}

struct FlowObjective<'a> {
    cache: FlowCache,
    nt: usize,
    train: (&'a Tensor, Option<&'a Tensor>),
    valid: (&'a Tensor, Option<&'a Tensor>),
}

impl Objective<PhiParams> for FlowObjective<'_> {
    fn loss_and_grad(&mut self, p: &PhiParams, idx: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let xb = self.train.0.select_rows(idx);
        let yb = self.train.1.map(|t| t.select_rows(idx));
        let (loss, _, grads) = self.cache.inverse(p, idx.len(), self.nt, true)?.loss_and_grad(p, &xb, yb.as_ref())?;
        Ok((loss, grads))
    }

    /// Models are selected on the likelihood term alone.
    fn validation(&mut self, p: &PhiParams) -> Result<f64> {
        let set = if self.valid.0.rows() > 0 { self.valid } else { self.train };
        Ok(self.cache.terms(p, set.0, set.1, self.nt)?.1.nll)
    }
}

fn fit_flow(params: PhiParams, cfg: &FlowConfig, train: (&Tensor, Option<&Tensor>), valid: (&Tensor, Option<&Tensor>)) -> Result<(PhiParams, TrainReport)> {
    cfg.validate()?;
    check_rows(&params, train.0, train.1)?;
    if valid.0.rows() > 0 {
        check_rows(&params, valid.0, valid.1)?;
    }
    let mut obj = FlowObjective { cache: FlowCache::new(), nt: cfg.nt, train, valid };
    minibatch_adam(params, &cfg.loop_config(), train.0.rows(), &mut obj, |p| p.store.project())
}

/// Trains a conditional flow on normalized `(x, y)` rows with Adam, boxing
/// the residual-network weights after every step and returning the
/// parameters with the best validation likelihood.
pub fn train_flow(cfg: &FlowConfig, train: (&Tensor, Option<&Tensor>), valid: (&Tensor, Option<&Tensor>)) -> Result<(PhiParams, TrainReport)> {
    cfg.validate()?;
    let m = train.1.map_or(0, Tensor::cols);
    let init = PhiParams::init(cfg.dims(train.0.cols(), m), cfg.alpha1, cfg.alpha2, cfg.seed)?;
    fit_flow(init, cfg, train, valid)
}

/// Flows for `x | y` and for `y`, whose likelihoods sum to the joint one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFlow {
    pub phi_x: PhiParams,
    pub phi_y: PhiParams,
}

/// Per-sample joint negative log-likelihood of `(x, y)`.
pub fn joint_nll_per_sample(model: &JointFlow, x: &Tensor, y: &Tensor, nt: usize) -> Result<Vec<f64>> {
    let a = nll_per_sample(&model.phi_x, x, Some(y), nt)?;
    let b = nll_per_sample(&model.phi_y, y, None, nt)?;
    Ok(a.into_iter().zip(b).map(|(a, b)| a + b).collect())
}

/// Trains both blocks of a [`JointFlow`]. The objective is a sum of two
/// terms over disjoint parameter sets, so each block is fitted and
/// early-stopped on its own term.
pub fn train_joint_flow(cfg: &FlowConfig, train: (&Tensor, &Tensor), valid: (&Tensor, &Tensor)) -> Result<(JointFlow, TrainReport, TrainReport)> {
    cfg.validate()?;
    let (n, m) = (train.0.cols(), train.1.cols());
    let px = PhiParams::init(cfg.dims(n, m), cfg.alpha1, cfg.alpha2, cfg.seed)?;
    let py = PhiParams::init(PhiDims::new(m, 0, cfg.width, None), cfg.alpha1, cfg.alpha2, cfg.seed.wrapping_add(1))?;
    let (phi_x, rx) = fit_flow(px, cfg, (train.0, Some(train.1)), (valid.0, Some(valid.1)))?;
    let (phi_y, ry) = fit_flow(py, cfg, (train.1, None), (valid.1, None))?;
    Ok((JointFlow { phi_x, phi_y }, rx, ry))
}

/// Joint draws `(y, x)` from reference draws `z_y` and `z_x` with the same
/// row count: `y` by the context flow, then `x | y`.
pub fn sample_joint_flow(model: &JointFlow, z_y: &Tensor, z_x: &Tensor, nt: usize) -> Result<(Tensor, Tensor)> {
    if z_y.rows() != z_x.rows() {
        return Err(CoreError::invalid("reference draws must have matching rows"));
    }
    let y = sample_flow(&model.phi_y, None, z_y, nt)?;
    let x = sample_flow(&model.phi_x, Some(&y), z_x, nt)?;
    Ok((y, x))
}
