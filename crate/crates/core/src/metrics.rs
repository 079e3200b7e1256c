//! Evaluation metrics: test NLL, maximum mean discrepancy, simulation-based
//! calibration ranks with a uniformity statistic, and relative sample error.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cot::{self, JointFlow, PhiParams};
use crate::data::{derive_seed, GaussianOracle};
use crate::error::{CoreError, Result};
use crate::math;
use crate::pcp::{self, JointPcp, SampleConfig};
use crate::potentials::StrictPotentialParams;
use crate::tensor::Tensor;

/// Biased V-statistic MMD² with a squared exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub value: f64,
    pub n: usize,
    pub m: usize,
    /// Length scale `σ` of `k(a, b) = exp(−‖a − b‖² / (2σ²))`.
    pub bandwidth: f64,
}

/// Unit length scale, `k(a, b) = exp(−‖a − b‖²/2)`.
pub const UNIT_BANDWIDTH: f64 = 1.0;
/// The alternative reading `k(a, b) = exp(−‖a − b‖²)`.
pub const UNSCALED_BANDWIDTH: f64 = core::f64::consts::FRAC_1_SQRT_2;

fn kernel_mean(a: &Tensor, b: &Tensor, gamma: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        let mut row = 0.0;
        for j in 0..b.rows() {
            let d2: f64 = ai.iter().zip(b.row(j)).map(|(u, v)| (u - v) * (u - v)).sum();
            row += math::exp(-gamma * d2);
        }
        acc += row;
    }
    acc / (a.rows() * b.rows()) as f64
}

pub fn mmd_with(p: &Tensor, q: &Tensor, bandwidth: f64) -> Result<MmdResult> {
    if p.rows() == 0 || q.rows() == 0 {
        return Err(CoreError::invalid("MMD needs non-empty sample sets"));
    }
    if p.cols() != q.cols() {
        return Err(CoreError::invalid("MMD sample sets differ in dimension"));
    }
    if !(bandwidth > 0.0) {
        return Err(CoreError::invalid("MMD bandwidth must be positive"));
    }
    let gamma = 0.5 / (bandwidth * bandwidth);
    let value = kernel_mean(p, p, gamma) + kernel_mean(q, q, gamma) - 2.0 * kernel_mean(p, q, gamma);
    Ok(MmdResult { value, n: p.rows(), m: q.rows(), bandwidth })
}

/// MMD² with the unit length scale.
pub fn mmd(p: &Tensor, q: &Tensor) -> Result<MmdResult> {
    mmd_with(p, q, UNIT_BANDWIDTH)
}

/// A model with a per-sample negative log-likelihood of `x` given `y`.
pub trait DensityModel {
    fn nll_per_sample(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>>;
}

impl DensityModel for StrictPotentialParams {
    fn nll_per_sample(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        pcp::nll_per_sample(self, x, y)
    }
}

impl DensityModel for JointPcp {
    fn nll_per_sample(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        pcp::joint_nll_per_sample(self, x, y)
    }
}

impl DensityModel for GaussianOracle {
    fn nll_per_sample(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        Ok(self.nll(x, y))
    }
}

/// A flow model evaluated at a fixed number of time steps.
#[derive(Debug, Clone, Copy)]
pub struct FlowAt<'a, M> {
    pub model: &'a M,
    pub nt: usize,
}

fn context(y: &Tensor) -> Option<&Tensor> {
    (y.cols() > 0).then_some(y)
}

impl DensityModel for FlowAt<'_, PhiParams> {
    fn nll_per_sample(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        cot::nll_per_sample(self.model, x, context(y), self.nt)
    }
}

impl DensityModel for FlowAt<'_, JointFlow> {
    fn nll_per_sample(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        cot::joint_nll_per_sample(self.model, x, y, self.nt)
    }
}

/// Mean per-sample NLL over a test split.
pub fn test_nll<M: DensityModel + ?Sized>(model: &M, x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() == 0 || x.rows() != y.rows() {
        return Err(CoreError::invalid("test split must be non-empty with matching rows"));
    }
    let v = model.nll_per_sample(x, y)?;
    if v.iter().any(|l| !l.is_finite()) {
        return Err(CoreError::NonFinite { what: "test negative log-likelihood", step: 0 });
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Draws from a learned conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub x: Tensor,
    pub non_converged: usize,
}

/// Generates `count` samples of `x | y` reproducibly from `seed`.
pub trait ConditionalSampler {
    fn sample(&self, y: &[f64], count: usize, seed: u64) -> Result<Draws>;
}

pub struct PcpSampler<'a> {
    pub params: &'a StrictPotentialParams,
    pub config: SampleConfig,
}

impl ConditionalSampler for PcpSampler<'_> {
    fn sample(&self, y: &[f64], count: usize, seed: u64) -> Result<Draws> {
        let s = pcp::sample_posterior(self.params, y, count, &self.config, seed)?;
        let non_converged = s.non_converged();
        Ok(Draws { x: s.x, non_converged })
    }
}

impl ConditionalSampler for FlowAt<'_, PhiParams> {
    fn sample(&self, y: &[f64], count: usize, seed: u64) -> Result<Draws> {
        let z = pcp::standard_normal(count, self.model.dims.n, seed);
        let yt = Tensor::row_vector(y);
        let x = cot::sample_flow(self.model, context(&yt), &z, self.nt)?;
        Ok(Draws { x, non_converged: 0 })
    }
}

impl ConditionalSampler for GaussianOracle {
    fn sample(&self, y: &[f64], count: usize, seed: u64) -> Result<Draws> {
        let x = GaussianOracle::sample(self, y, count, &mut crate::data::stream_rng(seed, 0));
        Ok(Draws { x, non_converged: 0 })
    }
}

/// Calibration ranks: `ranks[i][d] = #{draws with component d < x*_d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcResult {
    pub draws: usize,
    pub ranks: Vec<Vec<usize>>,
    /// Non-converged draws per calibration pair.
    pub non_converged: Vec<usize>,
}

impl SbcResult {
    pub fn pairs(&self) -> usize {
        self.ranks.len()
    }

    pub fn dims(&self) -> usize {
        self.ranks.first().map_or(0, Vec::len)
    }

    /// Histogram of ranks `0..=L` for dimension `d`.
    pub fn counts(&self, d: usize) -> Vec<usize> {
        let mut c = alloc::vec![0; self.draws + 1];
        for r in &self.ranks {
            c[r[d]] += 1;
        }
        c
    }

    /// Empirical CDF of the ranks of dimension `d` at `0..=L`.
    pub fn ecdf(&self, d: usize) -> Vec<f64> {
        let m = self.pairs().max(1) as f64;
        let mut acc = 0;
        self.counts(d)
            .into_iter()
            .map(|c| {
                acc += c;
                acc as f64 / m
            })
            .collect()
    }
}

/// Rank of each component of `truth` among the rows of `draws`.
pub fn sbc_rank(truth: &[f64], draws: &Tensor) -> Vec<usize> {
    (0..truth.len()).map(|d| (0..draws.rows()).filter(|&r| draws[(r, d)] < truth[d]).count()).collect()
}

/// Ranks for `M` joint pairs `(x*, y*)` with `draws` posterior samples each.
/// Pair `i` samples with a seed derived from `(seed, i)`.
pub fn sbc_ranks<S: ConditionalSampler + ?Sized>(sampler: &S, truth_x: &Tensor, truth_y: &Tensor, draws: usize, seed: u64) -> Result<SbcResult> {
    if truth_x.rows() != truth_y.rows() || truth_x.rows() == 0 {
        return Err(CoreError::invalid("calibration pairs must be non-empty with matching rows"));
    }
    if draws == 0 {
        return Err(CoreError::invalid("calibration needs at least one posterior draw"));
    }
    let mut ranks = Vec::with_capacity(truth_x.rows());
    let mut non_converged = Vec::with_capacity(truth_x.rows());
    for i in 0..truth_x.rows() {
        let s = sampler.sample(truth_y.row(i), draws, derive_seed(seed, i as u64))?;
        if s.x.shape() != (draws, truth_x.cols()) {
            return Err(CoreError::invalid("sampler returned the wrong shape"));
        }
        ranks.push(sbc_rank(truth_x.row(i), &s.x));
        non_converged.push(s.non_converged);
    }
    Ok(SbcResult { draws, ranks, non_converged })
}

/// Per dimension, `sup_r |F̂(r) − (r + 1)/(L + 1)|` against the discrete
/// uniform law on `{0, …, L}`.
pub fn ks_uniformity(result: &SbcResult) -> Vec<f64> {
    let l1 = (result.draws + 1) as f64;
    (0..result.dims())
        .map(|d| {
            result.ecdf(d).iter().enumerate().map(|(r, f)| (f - (r + 1) as f64 / l1).abs()).fold(0.0, f64::max)
        })
        .collect()
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn relative_sample_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::invalid("sample sets differ in shape"));
    }
    let denom = b.frobenius();
    if !(denom > 0.0) {
        return Err(CoreError::invalid("reference samples have zero norm"));
    }
    Ok(a.sub(b).frobenius() / denom)
}
