//! One trained model of either family, conditional or joint.

use cotlab_core::cot::{self, JointFlow, PhiDims, PhiParams};
use cotlab_core::data::{derive_seed, Dataset, Split};
use cotlab_core::metrics::{self, ConditionalSampler, DensityModel, Draws, FlowAt, MmdResult, PcpSampler};
use cotlab_core::pcp::{self, JointPcp, SampleConfig};
use cotlab_core::potentials::{FicnnDims, StrictPotentialParams};
use cotlab_core::train::TrainReport;
use cotlab_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{Hyper, ModelKind, Task, TrainBudget};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Pcp(StrictPotentialParams),
    PcpJoint(JointPcp),
    Cot { params: PhiParams, nt: usize },
    CotJoint { model: JointFlow, nt: usize },
}

/// Test-split metrics in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub test_nll: f64,
    pub mmd: f64,
    pub mmd_rows: usize,
    /// Inversions that stopped short of the tolerance while sampling.
    pub non_converged: usize,
}

/// Rows for evaluation: the test split, or the validation split for
/// datasets without one.
pub fn eval_split(ds: &Dataset) -> Split {
    if ds.splits.test.is_empty() {
        Split::Valid
    } else {
        Split::Test
    }
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Pcp(_) | Model::PcpJoint(_) => ModelKind::Pcp,
            Model::Cot { .. } | Model::CotJoint { .. } => ModelKind::Cot,
        }
    }

    pub fn is_joint(&self) -> bool {
        matches!(self, Model::PcpJoint(_) | Model::CotJoint { .. })
    }

    /// Fits `hyper` on the normalized training split, early-stopping on the
    /// validation split. Joint models return one report per block.
    pub fn train(hyper: &Hyper, task: Task, ds: &Dataset, budget: TrainBudget, seed: u64) -> Result<(Model, Vec<TrainReport>)> {
        hyper.validate()?;
        let (xt, yt) = ds.part(Split::Train);
        let (xv, yv) = ds.part(Split::Valid);
        if xt.rows() == 0 || xv.rows() == 0 {
            return Err(Error::Validation("training and validation splits must be non-empty".into()));
        }
        Ok(match (hyper, task.is_joint()) {
            (Hyper::Pcp { .. }, false) => {
                let cfg = hyper.pcp_config(budget, seed).expect("pcp tuple");
                let (p, r) = pcp::train(&cfg, (&xt, &yt), (&xv, &yv))?;
                (Model::Pcp(p), vec![r])
            }
            (Hyper::Pcp { depth, width, .. }, true) => {
                let cfg = hyper.pcp_config(budget, seed).expect("pcp tuple");
                let fd = FicnnDims { m: ds.m(), depth: *depth, width: *width };
                let (p, rx, ry) = pcp::train_joint(&cfg, fd, (&xt, &yt), (&xv, &yv))?;
                (Model::PcpJoint(p), vec![rx, ry])
            }
            (Hyper::Cot { nt, .. }, false) => {
                let cfg = hyper.flow_config(budget, seed).expect("cot tuple");
                let (p, r) = cot::train_flow(&cfg, (&xt, Some(&yt)), (&xv, Some(&yv)))?;
                (Model::Cot { params: p, nt: *nt }, vec![r])
            }
            (Hyper::Cot { nt, .. }, true) => {
                let cfg = hyper.flow_config(budget, seed).expect("cot tuple");
                let (p, rx, ry) = cot::train_joint_flow(&cfg, (&xt, &yt), (&xv, &yv))?;
                (Model::CotJoint { model: p, nt: *nt }, vec![rx, ry])
            }
        })
    }

    pub fn with_nt(mut self, new_nt: Option<usize>) -> Self {
        if let Some(v) = new_nt {
            match &mut self {
                Model::Cot { nt, .. } | Model::CotJoint { nt, .. } => *nt = v,
                _ => {}
            }
        }
        self
    }

    /// Per-row NLL of `x | y`, or of `(x, y)` for joint models.
    pub fn nll_per_sample(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        Ok(match self {
            Model::Pcp(p) => p.nll_per_sample(x, y)?,
            Model::PcpJoint(p) => p.nll_per_sample(x, y)?,
            Model::Cot { params, nt } => FlowAt { model: params, nt: *nt }.nll_per_sample(x, y)?,
            Model::CotJoint { model, nt } => FlowAt { model, nt: *nt }.nll_per_sample(x, y)?,
        })
    }

    pub fn test_nll(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let v = self.nll_per_sample(x, y)?;
        if v.is_empty() || v.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numerical("non-finite test negative log-likelihood".into()));
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One draw of `x | y_i` per row of `y`.
    pub fn sample_rows(&self, y: &Tensor, seed: u64, cfg: &SampleConfig) -> Result<Draws> {
        match self {
            Model::Pcp(p) | Model::PcpJoint(JointPcp { pot_x: p, .. }) => {
                let z = pcp::standard_normal(y.rows(), p.dims().n, seed);
                let mut inv = pcp::Inverter::new(p)?;
                let mut x = Tensor::zeros(y.rows(), z.cols());
                let mut non_converged = 0;
                for r in 0..y.rows() {
                    let out = inv.invert(p, z.row(r), y.row(r), cfg)?;
                    x.row_mut(r).copy_from_slice(&out.x);
                    non_converged += usize::from(!out.converged);
                }
                Ok(Draws { x, non_converged })
            }
            Model::Cot { params, nt } | Model::CotJoint { model: JointFlow { phi_x: params, .. }, nt } => {
                let z = pcp::standard_normal(y.rows(), params.dims.n, seed);
                let x = cot::sample_flow(params, Some(y), &z, *nt)?;
                Ok(Draws { x, non_converged: 0 })
            }
        }
    }

    /// `count` draws of `(y, x)` from a joint model.
    pub fn sample_joint(&self, count: usize, seed: u64, cfg: &SampleConfig) -> Result<(Tensor, Draws)> {
        match self {
            Model::PcpJoint(p) => {
                let (y, x) = pcp::sample_joint(p, count, cfg, seed)?;
                let non_converged = y.non_converged() + x.non_converged();
                Ok((y.x, Draws { x: x.x, non_converged }))
            }
            Model::CotJoint { model, nt } => {
                let zy = pcp::standard_normal(count, model.phi_y.dims.n, seed);
                let zx = pcp::standard_normal(count, model.phi_x.dims.n, seed.wrapping_add(1));
                let (y, x) = cot::sample_joint_flow(model, &zy, &zx, *nt)?;
                Ok((y, Draws { x, non_converged: 0 }))
            }
            _ => Err(Error::Validation("joint sampling needs a joint model".into())),
        }
    }

    /// Test NLL plus MMD between generated and held-out rows. Conditional
    /// models generate `x̂ | y` for each held-out `y` and compare `(x̂, y)`
    /// with `(x, y)`; joint models compare fresh joint draws.
    pub fn evaluate(&self, ds: &Dataset, mmd_rows: usize, cfg: &SampleConfig, seed: u64) -> Result<Metrics> {
        let (x, y) = ds.part(eval_split(ds));
        let test_nll = self.test_nll(&x, &y)?;
        let rows = x.rows().min(mmd_rows.max(1));
        let (x, y) = (x.slice_rows(0, rows), y.slice_rows(0, rows));
        let (gen, non_converged) = if self.is_joint() {
            let (yg, d) = self.sample_joint(rows, derive_seed(seed, 1), cfg)?;
            (Tensor::hcat(&[&d.x, &yg]), d.non_converged)
        } else {
            let d = self.sample_rows(&y, derive_seed(seed, 1), cfg)?;
            (Tensor::hcat(&[&d.x, &y]), d.non_converged)
        };
        if !gen.is_finite() {
            return Err(Error::Numerical("generated samples are not finite".into()));
        }
        let MmdResult { value, .. } = metrics::mmd(&gen, &Tensor::hcat(&[&x, &y]))?;
        Ok(Metrics { test_nll, mmd: value, mmd_rows: rows, non_converged })
    }

    /// Posterior sampler for a fixed `y`.
    pub fn sampler<'a>(&'a self, cfg: SampleConfig) -> ModelSampler<'a> {
        ModelSampler { model: self, cfg }
    }

    pub fn phi_dims(&self) -> Option<PhiDims> {
        match self {
            Model::Cot { params, .. } => Some(params.dims),
            _ => None,
        }
    }
}

pub struct ModelSampler<'a> {
    model: &'a Model,
    cfg: SampleConfig,
}

impl ConditionalSampler for ModelSampler<'_> {
    fn sample(&self, y: &[f64], count: usize, seed: u64) -> cotlab_core::Result<Draws> {
        match self.model {
            Model::Pcp(p) | Model::PcpJoint(JointPcp { pot_x: p, .. }) => PcpSampler { params: p, config: self.cfg }.sample(y, count, seed),
            Model::Cot { params, nt } | Model::CotJoint { model: JointFlow { phi_x: params, .. }, nt } => {
                FlowAt { model: params, nt: *nt }.sample(y, count, seed)
            }
        }
    }
}
