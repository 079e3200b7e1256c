use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{stream_rng, Dataset, Normalization, Splits};
use crate::error::{CoreError, Result};
use crate::linalg::{cholesky, inverse, psd_sqrt, spd_logdet};
use crate::math::LN_2PI;
use crate::tensor::Tensor;

/// Joint Gaussian over `(x, y)` with `x` first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBenchSpec {
    pub n: usize,
    pub m: usize,
    pub mean: Vec<f64>,
    pub cov: Tensor,
}

impl GaussianBenchSpec {
    pub fn new(n: usize, m: usize, mean: Vec<f64>, cov: Tensor) -> Result<Self> {
        let spec = Self { n, m, mean, cov };
        spec.validate()?;
        Ok(spec)
    }

    /// The default benchmark: `n = 2`, `m = 1`, zero mean, unit variances and
    /// correlations strong enough that the conditional differs clearly from
    /// the marginal.
    pub fn standard() -> Self {
        let cov = Tensor::from_rows(&[alloc::vec![1.0, 0.4, 0.6], alloc::vec![0.4, 1.0, -0.3], alloc::vec![0.6, -0.3, 1.0]]);
        Self { n: 2, m: 1, mean: alloc::vec![0.0; 3], cov }
    }

    pub fn dim(&self) -> usize {
        self.n + self.m
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.n == 0 {
            return Err(CoreError::invalid("benchmark needs n >= 1"));
        }
        if self.mean.len() != d || self.cov.shape() != (d, d) {
            return Err(CoreError::invalid("mean and covariance do not match n + m"));
        }
        if !self.cov.is_finite() || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("benchmark parameters must be finite"));
        }
        crate::linalg::check_symmetric(&self.cov, 1e-12)?;
        cholesky(&self.cov).map_err(|_| CoreError::invalid("benchmark covariance is not positive definite"))?;
        Ok(())
    }

    fn block(&self, r0: usize, rn: usize, c0: usize, cn: usize) -> Tensor {
        Tensor::from_fn(rn, cn, |r, c| self.cov[(r0 + r, c0 + c)])
    }

    /// The same law in coordinates normalized by `norm`.
    pub fn normalized(&self, norm: &Normalization) -> Result<Self> {
        let d = self.dim();
        if norm.x.mean.len() != self.n || norm.y.mean.len() != self.m {
            return Err(CoreError::invalid("normalization does not match the benchmark"));
        }
        let shift: Vec<f64> = norm.x.mean.iter().chain(&norm.y.mean).copied().collect();
        let scale: Vec<f64> = norm.x.std.iter().chain(&norm.y.std).copied().collect();
        let mean = (0..d).map(|i| (self.mean[i] - shift[i]) / scale[i]).collect();
        let cov = Tensor::from_fn(d, d, |i, j| self.cov[(i, j)] / (scale[i] * scale[j]));
        Self::new(self.n, self.m, mean, cov)
    }
}

/// `N(mean, cov)` with the Brenier map `z ↦ mean + C z` from `N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditional {
    pub mean: Vec<f64>,
    pub cov: Tensor,
    /// Symmetric PSD square root of `cov`.
    pub sqrt: Tensor,
    pub entropy: f64,
}

impl GaussianConditional {
    pub fn map(&self, z: &Tensor) -> Tensor {
        let mut out = z.matmul(&self.sqrt);
        for r in 0..out.rows() {
            for (v, mu) in out.row_mut(r).iter_mut().zip(&self.mean) {
                *v += mu;
            }
        }
        out
    }
}

/// Conditional law of `x` given `y` for every `y`: only the mean moves.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub spec: GaussianBenchSpec,
    /// `Σxy Σyy⁻¹`, shape `n × m`.
    pub gain: Tensor,
    pub cov: Tensor,
    pub sqrt: Tensor,
    precision: Tensor,
    logdet: f64,
}

impl GaussianOracle {
    pub fn new(spec: &GaussianBenchSpec) -> Result<Self> {
        spec.validate()?;
        let (n, m) = (spec.n, spec.m);
        let sxx = spec.block(0, n, 0, n);
        let (gain, cov) = if m == 0 {
            (Tensor::zeros(n, 0), sxx)
        } else {
            let sxy = spec.block(0, n, n, m);
            let syy_inv = inverse(&spec.block(n, m, n, m))?;
            let gain = sxy.matmul(&syy_inv);
            let cov = sxx.sub(&gain.matmul(&sxy.transpose()));
            (gain, cov.add(&cov.transpose()).scale(0.5))
        };
        let sqrt = psd_sqrt(&cov)?;
        let precision = crate::linalg::spd_inverse(&cov)?;
        let logdet = spd_logdet(&cov)?;
        Ok(Self { spec: spec.clone(), gain, cov, sqrt, precision, logdet })
    }

    pub fn entropy(&self) -> f64 {
        0.5 * self.spec.n as f64 * (1.0 + LN_2PI) + 0.5 * self.logdet
    }

    pub fn mean(&self, y: &[f64]) -> Vec<f64> {
        let (n, m) = (self.spec.n, self.spec.m);
        (0..n)
            .map(|i| self.spec.mean[i] + (0..m).map(|j| self.gain[(i, j)] * (y[j] - self.spec.mean[n + j])).sum::<f64>())
            .collect()
    }

    pub fn conditional(&self, y: &[f64]) -> Result<GaussianConditional> {
        if y.len() != self.spec.m {
            return Err(CoreError::invalid("y has the wrong dimension"));
        }
        Ok(GaussianConditional { mean: self.mean(y), cov: self.cov.clone(), sqrt: self.sqrt.clone(), entropy: self.entropy() })
    }

    /// Exact posterior draws given `y`.
    pub fn sample<R: Rng + ?Sized>(&self, y: &[f64], count: usize, rng: &mut R) -> Tensor {
        let n = self.spec.n;
        let z = Tensor::from_fn(count, n, |_, _| StandardNormal.sample(rng));
        let mean = self.mean(y);
        let mut out = z.matmul(&self.sqrt);
        for r in 0..count {
            for (v, mu) in out.row_mut(r).iter_mut().zip(&mean) {
                *v += mu;
            }
        }
        out
    }

    /// `-log π(x | y)` per row.
    pub fn nll(&self, x: &Tensor, y: &Tensor) -> Vec<f64> {
        let n = self.spec.n;
        (0..x.rows())
            .map(|r| {
                let mu = self.mean(y.row(r));
                let d: Vec<f64> = x.row(r).iter().zip(&mu).map(|(a, b)| a - b).collect();
                let q: f64 = (0..n).map(|i| d[i] * (0..n).map(|j| self.precision[(i, j)] * d[j]).sum::<f64>()).sum();
                0.5 * (q + self.logdet + n as f64 * LN_2PI)
            })
            .collect()
    }
}

/// Mean, covariance and Brenier map of `x | y` by the Schur complement.
pub fn analytic_conditional(spec: &GaussianBenchSpec, y: &[f64]) -> Result<GaussianConditional> {
    GaussianOracle::new(spec)?.conditional(y)
}

/// `count` joint draws as `(x, y)`.
pub fn sample_joint<R: Rng + ?Sized>(spec: &GaussianBenchSpec, count: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let l = cholesky(&spec.cov)?;
    let d = spec.dim();
    let z = Tensor::from_fn(count, d, |_, _| StandardNormal.sample(rng));
    let mut joint = z.matmul(&l.transpose());
    for r in 0..count {
        for (v, mu) in joint.row_mut(r).iter_mut().zip(&spec.mean) {
            *v += mu;
        }
    }
    Ok((joint.slice_cols(0, spec.n), joint.slice_cols(spec.n, spec.m)))
}

/// A sampled benchmark dataset with its oracle in raw and normalized
/// coordinates.
#[derive(Debug, Clone)]
pub struct GaussianBench {
    pub dataset: Dataset,
    pub oracle: GaussianOracle,
    pub normalized: GaussianOracle,
}

/// `count` joint draws split 8:1:1 and normalized with training statistics.
pub fn gaussian_bench(spec: &GaussianBenchSpec, count: usize, seed: u64) -> Result<GaussianBench> {
    let oracle = GaussianOracle::new(spec)?;
    let (x, y) = sample_joint(spec, count, &mut stream_rng(seed, 0))?;
    let x_names = (1..=spec.n).map(|i| alloc::format!("x{i}")).collect::<Vec<String>>();
    let y_names = (1..=spec.m).map(|i| alloc::format!("y{i}")).collect::<Vec<String>>();
    let dataset = Dataset::new(x_names, y_names, x, y, Splits::random(count, [8, 1, 1], seed))?;
    let normalized = GaussianOracle::new(&spec.normalized(&dataset.norm)?)?;
    Ok(GaussianBench { dataset, oracle, normalized })
}

impl GaussianBench {
    /// Fresh draws from the normalized law, independent of the dataset.
    pub fn fresh(&self, count: usize, seed: u64) -> Result<(Tensor, Tensor)> {
        sample_joint(&self.normalized.spec, count, &mut stream_rng(seed, 1))
    }
}
