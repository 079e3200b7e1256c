use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::{stream_rng, Dataset, Splits};
use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::Tensor;

/// Support of the log-uniform prior on each log-rate.
pub const LV_PRIOR: (f64, f64) = (-5.0, 2.0);

/// Order of the summary statistics.
pub const LV_SUMMARY_NAMES: [&str; 9] = [
    "mean_1", "mean_2", "logvar_1", "logvar_2", "acf1_1", "acf2_1", "acf1_2", "acf2_2", "xcorr",
];

/// Reaction rates: predator birth `x₁S₁S₂`, predator death `x₂S₁`, prey
/// birth `x₃S₂`, prey death `x₄S₁S₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvParams {
    pub rates: [f64; 4],
}

impl LvParams {
    pub fn from_log(log_rates: [f64; 4]) -> Self {
        Self { rates: log_rates.map(math::exp) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(CoreError::invalid("reaction rates must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvConfig {
    pub initial: [u64; 2],
    pub horizon: f64,
    pub record_dt: f64,
    pub max_events: usize,
    pub variance_floor: f64,
}

impl Default for LvConfig {
    fn default() -> Self {
        Self { initial: [50, 100], horizon: 30.0, record_dt: 0.2, max_events: 100_000, variance_floor: 1e-12 }
    }
}

impl LvConfig {
    pub fn grid_len(&self) -> usize {
        math::round(self.horizon / self.record_dt) as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !(self.record_dt > 0.0) {
            return Err(CoreError::invalid("horizon and recording interval must be positive"));
        }
        if self.grid_len() < 3 {
            return Err(CoreError::invalid("the recording grid needs at least 3 points"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(CoreError::invalid("variance floor must be positive"));
        }
        Ok(())
    }
}

/// Populations on the recording grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvSeries {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub events: usize,
    /// The event cap was hit; the last state is held to the horizon.
    pub truncated: bool,
}

/// Exact stochastic simulation from `S(0)`, recording the state at
/// `t = k·record_dt` for `k = 0..grid_len`.
pub fn gillespie_lv<R: Rng + ?Sized>(params: &LvParams, cfg: &LvConfig, rng: &mut R) -> Result<LvSeries> {
    params.validate()?;
    cfg.validate()?;
    let len = cfg.grid_len();
    let [x1, x2, x3, x4] = params.rates;
    let (mut s1, mut s2) = (cfg.initial[0], cfg.initial[1]);
    let mut out = LvSeries { s1: Vec::with_capacity(len), s2: Vec::with_capacity(len), events: 0, truncated: false };
    let mut t = 0.0;
    let mut next = 0usize;
    while next < len {
        let (f1, f2) = (s1 as f64, s2 as f64);
        let a = [x1 * f1 * f2, x2 * f1, x3 * f2, x4 * f1 * f2];
        let total: f64 = a.iter().sum();
        let capped = out.events >= cfg.max_events;
        let t_next = if total > 0.0 && !capped {
            let e: f64 = Exp1.sample(rng);
            t + e / total
        } else {
            f64::INFINITY
        };
        while next < len && (next as f64) * cfg.record_dt < t_next {
            out.s1.push(f1);
            out.s2.push(f2);
            next += 1;
        }
        if next >= len || !t_next.is_finite() {
            out.truncated = capped && total > 0.0;
            while next < len {
                out.s1.push(f1);
                out.s2.push(f2);
                next += 1;
            }
            break;
        }
        t = t_next;
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut k = 3;
        for (i, ai) in a.iter().enumerate() {
            acc += ai;
            if u < acc {
                k = i;
                break;
            }
        }
        match k {
            0 => s1 += 1,
            1 => s1 = s1.saturating_sub(1),
            2 => s2 += 1,
            _ => s2 = s2.saturating_sub(1),
        }
        out.events += 1;
    }
    Ok(out)
}

fn moments(s: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn autocorr(s: &[f64], mean: f64, var: f64, lag: usize) -> f64 {
    let n = s.len() as f64;
    let c: f64 = s.windows(lag + 1).map(|w| (w[0] - mean) * (w[lag] - mean)).sum::<f64>() / n;
    (c / var).clamp(-1.0, 1.0)
}

/// The nine statistics in [`LV_SUMMARY_NAMES`] order: means, log-variances,
/// lag-1 and lag-2 autocorrelations of each species, and the
/// cross-correlation. Population normalization throughout; variances are
/// floored, which makes every correlation of a constant series 0.
pub fn lv_summary(s1: &[f64], s2: &[f64], floor: f64) -> Result<[f64; 9]> {
    if s1.len() != s2.len() || s1.len() < 3 {
        return Err(CoreError::invalid("series must have equal length of at least 3"));
    }
    let (m1, v1) = moments(s1);
    let (m2, v2) = moments(s2);
    let (v1, v2) = (v1.max(floor), v2.max(floor));
    let n = s1.len() as f64;
    let cov = s1.iter().zip(s2).map(|(a, b)| (a - m1) * (b - m2)).sum::<f64>() / n;
    let xcorr = (cov / math::sqrt(v1 * v2)).clamp(-1.0, 1.0);
    Ok([
        m1,
        m2,
        math::log(v1),
        math::log(v2),
        autocorr(s1, m1, v1, 1),
        autocorr(s1, m1, v1, 2),
        autocorr(s2, m2, v2, 1),
        autocorr(s2, m2, v2, 2),
        xcorr,
    ])
}

/// One log-rate vector from the prior `U(-5, 2)⁴`.
pub fn sample_lv_prior<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    let (lo, hi) = LV_PRIOR;
    core::array::from_fn(|_| lo + (hi - lo) * rng.random::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvDraw {
    pub log_rates: [f64; 4],
    pub summary: [f64; 9],
    pub truncated: bool,
}

/// Draw `index` of a simulated dataset, from its own generator stream so
/// draws can be computed in any order.
pub fn lv_draw(seed: u64, index: u64, cfg: &LvConfig) -> Result<LvDraw> {
    let mut rng = stream_rng(seed, index);
    let log_rates = sample_lv_prior(&mut rng);
    let series = gillespie_lv(&LvParams::from_log(log_rates), cfg, &mut rng)?;
    let summary = lv_summary(&series.s1, &series.s2, cfg.variance_floor)?;
    Ok(LvDraw { log_rates, summary, truncated: series.truncated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvDataset {
    pub dataset: Dataset,
    pub truncated: Vec<bool>,
}

/// Assembles simulated draws into a dataset with `x = log rates`,
/// `y = summaries`, a 9:1 train/validation split and training-split
/// normalization.
pub fn assemble_lv(draws: &[LvDraw], seed: u64) -> Result<LvDataset> {
    if draws.is_empty() {
        return Err(CoreError::invalid("need at least one draw"));
    }
    let n = draws.len();
    let x = Tensor::from_fn(n, 4, |r, c| draws[r].log_rates[c]);
    let y = Tensor::from_fn(n, 9, |r, c| draws[r].summary[c]);
    let x_names = (1..=4).map(|i| alloc::format!("log_x{i}")).collect();
    let y_names = LV_SUMMARY_NAMES.iter().map(|s| String::from(*s)).collect();
    let dataset = Dataset::new(x_names, y_names, x, y, Splits::random(n, [9, 1, 0], seed))?;
    Ok(LvDataset { dataset, truncated: draws.iter().map(|d| d.truncated).collect() })
}

/// Simulates `n` prior draws sequentially; see [`lv_draw`] for parallel use.
pub fn build_lv_dataset(n: usize, seed: u64, cfg: &LvConfig) -> Result<LvDataset> {
    let draws = (0..n as u64).map(|i| lv_draw(seed, i, cfg)).collect::<Result<Vec<_>>>()?;
    assemble_lv(&draws, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rates_hold_the_initial_state() {
        let cfg = LvConfig::default();
        let s = gillespie_lv(&LvParams { rates: [0.0; 4] }, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.events, 0);
        assert_eq!(s.s1.len(), 151);
        assert!(s.s1.iter().all(|&v| v == 50.0) && s.s2.iter().all(|&v| v == 100.0));
        assert!(!s.truncated);
        let sum = lv_summary(&s.s1, &s.s2, cfg.variance_floor).unwrap();
        assert_eq!(sum[..2], [50.0, 100.0]);
        assert_eq!(sum[2], math::log(1e-12));
        assert!(sum[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn summary_of_a_ramp() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        let sum = lv_summary(&s, &s, 1e-12).unwrap();
        assert_eq!(sum[0], 3.0);
        assert!((sum[2] - math::log(2.0)).abs() < 1e-15);
        assert!((sum[4] - 0.4).abs() < 1e-15);
        assert!((sum[8] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pure_death_mean_decays_exponentially() {
        let cfg = LvConfig { horizon: 2.0, ..LvConfig::default() };
        let x2 = 0.7;
        let runs = 10_000;
        let len = cfg.grid_len();
        let mut sum = alloc::vec![0.0; len];
        let mut sq = alloc::vec![0.0; len];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..runs {
            let s = gillespie_lv(&LvParams { rates: [0.0, x2, 0.0, 0.0] }, &cfg, &mut rng).unwrap();
            assert!(s.s2.iter().all(|&v| v == 100.0));
            for (k, v) in s.s1.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        for k in [1, 5, len - 1] {
            let t = k as f64 * cfg.record_dt;
            let mean = sum[k] / runs as f64;
            let se = math::sqrt((sq[k] / runs as f64 - mean * mean) / runs as f64);
            let want = 50.0 * math::exp(-x2 * t);
            assert!((mean - want).abs() < 3.0 * se, "t={t}: {mean} vs {want} (se {se})");
        }
    }

    #[test]
    fn event_cap_truncates_and_populations_stay_non_negative() {
        let cfg = LvConfig { max_events: 500, ..LvConfig::default() };
        let s = gillespie_lv(&LvParams { rates: [0.01, 0.5, 1.0, 0.01] }, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.truncated);
        assert_eq!(s.events, 500);
        assert_eq!(s.s1.len(), cfg.grid_len());
        assert!(s.s1.iter().chain(&s.s2).all(|&v| v >= 0.0));
    }

    #[test]
    fn draws_are_reproducible() {
        let cfg = LvConfig::default();
        assert_eq!(lv_draw(3, 7, &cfg).unwrap(), lv_draw(3, 7, &cfg).unwrap());
        let a = build_lv_dataset(10, 2, &cfg).unwrap();
        assert_eq!(a, build_lv_dataset(10, 2, &cfg).unwrap());
        assert_eq!(a.dataset.splits.train.len(), 9);
        for d in 0..20 {
            let s = lv_draw(1, d, &cfg).unwrap().summary;
            assert!(s[4..].iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
