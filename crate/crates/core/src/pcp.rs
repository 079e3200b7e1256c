//! Static conditional transport: maximum-likelihood training of a
//! strictly convex potential, sampling by convex conjugation, and MAP
//! estimation.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, NodeId, Plan};
use crate::error::{CoreError, Result};
use crate::math::LN_2PI;
use crate::optim::{lbfgs, LbfgsConfig, LbfgsStatus};
use crate::potentials::{project_nonneg, ConvexPotential, FicnnDims, FicnnParams, PicnnDims, PotentialGraph, StrictPotentialParams};
use crate::tensor::Tensor;
use crate::train::{minibatch_adam, LoopConfig, Objective, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub depth: usize,
    pub width: usize,
    /// Context width; the default rule applies when absent.
    pub context: Option<usize>,
    pub seed: u64,
    /// Optimizer steps between validation checks; 0 means once per epoch.
    pub val_interval: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
}

impl Default for PcpTrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, learning_rate: 1e-3, epochs: 50, depth: 2, width: 32, context: None, seed: 0, val_interval: 0, patience: 10 }
    }
}

impl PcpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(CoreError::invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    pub(crate) fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed: self.seed,
            val_interval: self.val_interval,
            patience: self.patience,
        }
    }

    pub fn dims(&self, n: usize, m: usize) -> PicnnDims {
        let mut d = PicnnDims::new(n, m, self.depth, self.width);
        if let Some(u) = self.context {
            d.context = u;
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub history: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_iterations: 200, history: 10 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(CoreError::invalid("sampling tolerance must be positive"));
        }
        if self.history == 0 {
            return Err(CoreError::invalid("quasi-Newton history must be at least 1"));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig { tolerance: self.tolerance, history: self.history, max_iterations: self.max_iterations, ..LbfgsConfig::default() }
    }
}

/// Graph of the per-sample negative log-likelihood of a convex potential,
/// `½‖∇G‖² − log det ∇²G`, with parameter and input gradients.
pub struct NllGraph {
    g: Graph,
    params: Vec<NodeId>,
    x: NodeId,
    y: Option<NodeId>,
    rows: NodeId,
    loss: NodeId,
    grads: Vec<NodeId>,
    xgrad: NodeId,
    plan_train: Plan,
    plan_rows: Plan,
    plan_input: Plan,
}

impl NllGraph {
    pub fn new<P: ConvexPotential + ?Sized>(p: &P, batch: usize) -> Result<Self> {
        let mut g = Graph::new();
        let params = p.store().declare(&mut g, "")?;
        let x = g.input("x", (batch, p.input_dim()))?;
        let y = match p.context_dim() {
            0 => None,
            m => Some(g.input("y", (batch, m))?),
        };
        let value = p.build(&mut g, &params, x, y)?;
        let gx = autodiff::batched_grad(&mut g, value, x)?;
        let h = autodiff::hessian_rows(&mut g, gx, x)?;
        let ld = g.logdet_spd(h)?;
        let sq = g.square_norm(gx);
        let half = g.scale(sq, 0.5);
        let rows = g.sub(half, ld)?;
        let loss = g.mean(rows);
        let mut grads = Vec::with_capacity(params.len());
        for (i, d) in g.grad(loss, &params)?.into_iter().enumerate() {
            grads.push(match d {
                Some(d) => d,
                None => g.constant(Tensor::zeros(p.store().get(i).rows(), p.store().get(i).cols())),
            });
        }
        let total = g.sum(rows);
        let xgrad = match g.grad(total, &[x])?[0] {
            Some(d) => d,
            None => g.constant(Tensor::zeros(batch, p.input_dim())),
        };
        let mut targets = vec![loss];
        targets.extend_from_slice(&grads);
        let plan_train = g.plan(&targets);
        let plan_rows = g.plan(&[rows]);
        let plan_input = g.plan(&[rows, xgrad]);
        Ok(Self { g, params, x, y, rows, loss, grads, xgrad, plan_train, plan_rows, plan_input })
    }

    fn bind<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>) -> Result<()> {
        p.store().bind(&mut self.g, &self.params)?;
        self.g.bind_from(self.x, x)?;
        if let (Some(id), Some(t)) = (self.y, y) {
            self.g.bind_from(id, t)?;
        } else if self.y.is_some() {
            return Err(CoreError::invalid("missing context input"));
        }
        Ok(())
    }

    /// Mean loss and its gradient with respect to every parameter tensor.
    pub fn loss_and_grad<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>) -> Result<(f64, Vec<Tensor>)> {
        self.bind(p, x, y)?;
        self.g.run(&self.plan_train)?;
        let grads = self.grads.iter().map(|&id| self.g.value(id).clone()).collect();
        Ok((self.g.value(self.loss).item(), grads))
    }

    /// Per-row loss, without the Gaussian normalizing constant.
    pub fn rows<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        self.bind(p, x, y)?;
        self.g.run(&self.plan_rows)?;
        Ok(self.g.value(self.rows).clone())
    }

    /// Per-row loss and its gradient with respect to the convex input.
    pub fn rows_and_input_grad<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        self.bind(p, x, y)?;
        self.g.run(&self.plan_input)?;
        Ok((self.g.value(self.rows).clone(), self.g.value(self.xgrad).clone()))
    }
}

/// [`NllGraph`]s keyed by batch size.
#[derive(Default)]
pub struct NllCache {
    graphs: BTreeMap<usize, NllGraph>,
}

impl NllCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get<P: ConvexPotential + ?Sized>(&mut self, p: &P, batch: usize) -> Result<&mut NllGraph> {
        if !self.graphs.contains_key(&batch) {
            self.graphs.insert(batch, NllGraph::new(p, batch)?);
        }
        Ok(self.graphs.get_mut(&batch).expect("inserted above"))
    }

    /// Mean per-row loss over all rows, evaluated in chunks.
    pub fn mean_loss<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>, chunk: usize) -> Result<f64> {
        let rows = self.per_row(p, x, y, chunk)?;
        Ok(rows.iter().sum::<f64>() / rows.len().max(1) as f64)
    }

    pub fn per_row<P: ConvexPotential + ?Sized>(&mut self, p: &P, x: &Tensor, y: Option<&Tensor>, chunk: usize) -> Result<Vec<f64>> {
        let n = x.rows();
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let xb = x.slice_rows(start, len);
            let yb = y.map(|t| t.slice_rows(start, len));
            let r = self.get(p, len)?.rows(p, &xb, yb.as_ref())?;
            out.extend_from_slice(r.data());
            start += len;
        }
        Ok(out)
    }
}

const EVAL_CHUNK: usize = 256;

/// Mean of `½‖∇ₓG̃‖² − log det ∇ₓ²G̃` over the rows of `(x, y)`; the
/// training objective, which omits the `n/2·ln 2π` constant.
pub fn nll_loss(params: &StrictPotentialParams, x: &Tensor, y: &Tensor) -> Result<f64> {
    NllCache::new().mean_loss(params, x, Some(y), EVAL_CHUNK)
}

/// Per-sample negative log-likelihood of `x` given `y`, including the
/// Gaussian normalizing constant.
pub fn nll_per_sample(params: &StrictPotentialParams, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let c = 0.5 * params.input_dim() as f64 * LN_2PI;
    Ok(NllCache::new().per_row(params, x, Some(y), EVAL_CHUNK)?.into_iter().map(|v| v + c).collect())
}

struct NllObjective<'a> {
    cache: NllCache,
    train: (&'a Tensor, Option<&'a Tensor>),
    valid: (&'a Tensor, Option<&'a Tensor>),
}

impl<P: ConvexPotential> Objective<P> for NllObjective<'_> {
    fn loss_and_grad(&mut self, params: &P, idx: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let xb = self.train.0.select_rows(idx);
        let yb = self.train.1.map(|t| t.select_rows(idx));
        self.cache.get(params, idx.len())?.loss_and_grad(params, &xb, yb.as_ref())
    }

    fn validation(&mut self, params: &P) -> Result<f64> {
        let set = if self.valid.0.rows() > 0 { self.valid } else { self.train };
        self.cache.mean_loss(params, set.0, set.1, EVAL_CHUNK)
    }
}

/// Minibatch Adam on the NLL of any convex potential, projecting after each
/// step and keeping the parameters with the best validation loss.
pub(crate) fn fit<P: ConvexPotential + Clone>(
    params: P,
    cfg: &PcpTrainConfig,
    train: (&Tensor, Option<&Tensor>),
    valid: (&Tensor, Option<&Tensor>),
) -> Result<(P, TrainReport)> {
    cfg.validate()?;
    let mut obj = NllObjective { cache: NllCache::new(), train, valid };
    minibatch_adam(params, &cfg.loop_config(), train.0.rows(), &mut obj, |p| project_nonneg(p))
}

/// Trains a PCP-Map on normalized `(x, y)` training rows, selecting the
/// parameters with the lowest validation NLL.
pub fn train(cfg: &PcpTrainConfig, train: (&Tensor, &Tensor), valid: (&Tensor, &Tensor)) -> Result<(StrictPotentialParams, TrainReport)> {
    check_pairs(train.0, train.1)?;
    check_pairs(valid.0, valid.1)?;
    let dims = cfg.dims(train.0.cols(), train.1.cols());
    let init = StrictPotentialParams::init(dims, cfg.seed)?;
    fit(init, cfg, (train.0, Some(train.1)), (valid.0, Some(valid.1)))
}

fn check_pairs(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(CoreError::invalid(alloc::format!("x has {} rows but y has {}", x.rows(), y.rows())));
    }
    Ok(())
}

/// Outcome of one conjugate inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `min_v G̃(v, y) − zᵀv` repeatedly against one set of parameters.
pub struct Inverter {
    pg: PotentialGraph,
}

impl Inverter {
    pub fn new<P: ConvexPotential + ?Sized>(params: &P) -> Result<Self> {
        Ok(Self { pg: PotentialGraph::new(params, 1, false)? })
    }

    /// `y` is ignored by potentials without a context input.
    pub fn invert<P: ConvexPotential + ?Sized>(&mut self, params: &P, z: &[f64], y: &[f64], cfg: &SampleConfig) -> Result<Inversion> {
        cfg.validate()?;
        let n = params.input_dim();
        if z.len() != n || y.len() != params.context_dim() {
            return Err(CoreError::invalid("inversion input has the wrong dimension"));
        }
        let yt = Tensor::row_vector(y);
        let ctx = (params.context_dim() > 0).then_some(&yt);
        let mut xt = Tensor::zeros(1, n);
        let pg = &mut self.pg;
        let obj = |v: &[f64], grad: &mut [f64]| -> Result<f64> {
            xt.data_mut().copy_from_slice(v);
            let (val, gx) = pg.value_grad(params, &xt, ctx)?;
            let mut f = val.item();
            for i in 0..n {
                grad[i] = gx.data()[i] - z[i];
                f -= z[i] * v[i];
            }
            Ok(f)
        };
        let r = lbfgs(obj, &vec![0.0; n], &cfg.lbfgs())?;
        Ok(Inversion { converged: r.status == LbfgsStatus::Converged, residual: r.grad_norm, iterations: r.iterations, x: r.x })
    }
}

/// `g(z; y)`: the point whose potential gradient equals `z`.
pub fn invert(params: &StrictPotentialParams, z: &[f64], y: &[f64], cfg: &SampleConfig) -> Result<Inversion> {
    Inverter::new(params)?.invert(params, z, y, cfg)
}

/// Conditional samples in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    /// `(N, n)`.
    pub x: Tensor,
    pub converged: Vec<bool>,
    pub max_residual: f64,
}

impl PosteriorSamples {
    pub fn non_converged(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }
}

/// Standard normal draws, `(rows, cols)`.
pub fn standard_normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Pushes the rows of `z` through the learned generator for a fixed `y`.
pub fn push_forward(params: &StrictPotentialParams, z: &Tensor, y: &[f64], cfg: &SampleConfig) -> Result<PosteriorSamples> {
    let mut inv = Inverter::new(params)?;
    let n = params.input_dim();
    let mut x = Tensor::zeros(z.rows(), n);
    let mut converged = Vec::with_capacity(z.rows());
    let mut max_residual: f64 = 0.0;
    for r in 0..z.rows() {
        let out = inv.invert(params, z.row(r), y, cfg)?;
        x.row_mut(r).copy_from_slice(&out.x);
        converged.push(out.converged);
        max_residual = max_residual.max(out.residual);
    }
    Ok(PosteriorSamples { x, converged, max_residual })
}

/// Draws `count` reference samples and maps them to samples of `x | y`.
pub fn sample_posterior(params: &StrictPotentialParams, y: &[f64], count: usize, cfg: &SampleConfig, seed: u64) -> Result<PosteriorSamples> {
    let z = standard_normal(count, params.input_dim(), seed);
    push_forward(params, &z, y, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimate {
    pub x: Vec<f64>,
    /// Log-density of the learned conditional at `x`.
    pub log_density: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Maximizes the learned conditional log-density
/// `−½‖∇ₓG̃‖² + log det ∇ₓ²G̃ − n/2·ln 2π` over `x`, starting at `x0`.
pub fn map_point(params: &StrictPotentialParams, y: &[f64], x0: &[f64], cfg: &SampleConfig) -> Result<MapEstimate> {
    cfg.validate()?;
    let n = params.input_dim();
    if x0.len() != n || y.len() != params.context_dim() {
        return Err(CoreError::invalid("MAP input has the wrong dimension"));
    }
    let mut graph = NllGraph::new(params, 1)?;
    let yt = Tensor::row_vector(y);
    let mut xt = Tensor::zeros(1, n);
    let obj = |v: &[f64], grad: &mut [f64]| -> Result<f64> {
        xt.data_mut().copy_from_slice(v);
        let (rows, gx) = graph.rows_and_input_grad(params, &xt, Some(&yt))?;
        grad.copy_from_slice(gx.data());
        Ok(rows.item())
    };
    let r = lbfgs(obj, x0, &cfg.lbfgs())?;
    Ok(MapEstimate {
        log_density: -(r.f + 0.5 * n as f64 * LN_2PI),
        converged: r.status == LbfgsStatus::Converged,
        iterations: r.iterations,
        x: r.x,
    })
}

/// Posterior-mean start followed by [`map_point`].
pub fn map_from_samples(params: &StrictPotentialParams, y: &[f64], samples: &Tensor, cfg: &SampleConfig) -> Result<MapEstimate> {
    map_point(params, y, &samples.col_means(), cfg)
}

/// Joint model: a FICNN potential for `y` and a PICNN potential for `x | y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPcp {
    pub pot_x: StrictPotentialParams,
    pub pot_y: FicnnParams,
}

/// `count` joint draws: `y` from the FICNN block, then `x | y`.
pub fn sample_joint(model: &JointPcp, count: usize, cfg: &SampleConfig, seed: u64) -> Result<(PosteriorSamples, PosteriorSamples)> {
    let m = model.pot_y.input_dim();
    let zy = standard_normal(count, m, seed);
    let zx = standard_normal(count, model.pot_x.input_dim(), seed.wrapping_add(1));
    let mut inv_y = Inverter::new(&model.pot_y)?;
    let mut inv_x = Inverter::new(&model.pot_x)?;
    let mut ys = PosteriorSamples { x: Tensor::zeros(count, m), converged: Vec::with_capacity(count), max_residual: 0.0 };
    let mut xs = PosteriorSamples { x: Tensor::zeros(count, zx.cols()), converged: Vec::with_capacity(count), max_residual: 0.0 };
    for r in 0..count {
        let y = inv_y.invert(&model.pot_y, zy.row(r), &[], cfg)?;
        let x = inv_x.invert(&model.pot_x, zx.row(r), &y.x, cfg)?;
        for (out, inv) in [(&mut ys, &y), (&mut xs, &x)] {
            out.x.row_mut(r).copy_from_slice(&inv.x);
            out.converged.push(inv.converged);
            out.max_residual = out.max_residual.max(inv.residual);
        }
    }
    Ok((ys, xs))
}

/// `J_x + J_y`: the NLL of the block-triangular inverse map
/// `(x, y) ↦ (∇ₓG̃(x, y), ∇F̃(y))` without the Gaussian constant.
pub fn joint_nll(pot_x: &StrictPotentialParams, pot_y: &FicnnParams, x: &Tensor, y: &Tensor) -> Result<f64> {
    let jx = NllCache::new().mean_loss(pot_x, x, Some(y), EVAL_CHUNK)?;
    let jy = NllCache::new().mean_loss(pot_y, y, None, EVAL_CHUNK)?;
    Ok(jx + jy)
}

/// Per-sample joint NLL including the `(n+m)/2·ln 2π` constant.
pub fn joint_nll_per_sample(model: &JointPcp, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let c = 0.5 * (x.cols() + y.cols()) as f64 * LN_2PI;
    let a = NllCache::new().per_row(&model.pot_x, x, Some(y), EVAL_CHUNK)?;
    let b = NllCache::new().per_row(&model.pot_y, y, None, EVAL_CHUNK)?;
    Ok(a.iter().zip(&b).map(|(p, q)| p + q + c).collect())
}

/// Trains both blocks. The objective separates over the two parameter
/// sets, so each block is fitted and early-stopped on its own term.
pub fn train_joint(
    cfg: &PcpTrainConfig,
    ficnn_dims: FicnnDims,
    train: (&Tensor, &Tensor),
    valid: (&Tensor, &Tensor),
) -> Result<(JointPcp, TrainReport, TrainReport)> {
    check_pairs(train.0, train.1)?;
    check_pairs(valid.0, valid.1)?;
    let dims = cfg.dims(train.0.cols(), train.1.cols());
    let px = StrictPotentialParams::init(dims, cfg.seed)?;
    let py = FicnnParams::init(ficnn_dims, cfg.seed.wrapping_add(1))?;
    let (pot_x, rx) = fit(px, cfg, (train.0, Some(train.1)), (valid.0, Some(valid.1)))?;
    let (pot_y, ry) = fit(py, cfg, (train.1, None), (valid.1, None))?;
    Ok((JointPcp { pot_x, pot_y }, rx, ry))
}
