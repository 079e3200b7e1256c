//! Datasets, splits and normalization, plus the built-in generators: UCI
//! table preprocessing, the stochastic Lotka-Volterra simulator, a
//! conditional Gaussian benchmark with its analytic oracle, and PCA.

mod gaussian;
mod lv;
mod pca;
mod uci;

pub use gaussian::{analytic_conditional, gaussian_bench, sample_joint, GaussianBench, GaussianBenchSpec, GaussianConditional, GaussianOracle};
pub use lv::{assemble_lv, build_lv_dataset, gillespie_lv, lv_draw, lv_summary, sample_lv_prior, LvConfig, LvDataset, LvDraw, LvParams, LvSeries, LV_PRIOR, LV_SUMMARY_NAMES};
pub use pca::{pca_project, Pca};
pub use uci::{preprocess_uci, RawTable, UciOptions, UciReport, UciTask};

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::Tensor;

/// Independent generator for stream `stream` of a master seed, using the
/// ChaCha stream counter so streams never overlap.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// A child seed: the first word of [`stream_rng`].
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    stream_rng(master, stream).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Row indices of each split; disjoint and exhaustive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `0..n` and cuts it by integer `ratio` weights
    /// (train, valid, test); every part but the last gets the floor of its
    /// share and the last takes the remainder.
    pub fn random(n: usize, ratio: [usize; 3], seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, 0x5917));
        let total: usize = ratio.iter().sum::<usize>().max(1);
        let last = ratio.iter().rposition(|&r| r > 0).unwrap_or(0);
        let mut parts: [Vec<usize>; 3] = Default::default();
        let mut start = 0;
        for (k, part) in parts.iter_mut().enumerate() {
            let len = if k == last { n - start } else if k > last { 0 } else { n * ratio[k] / total };
            *part = idx[start..start + len].to_vec();
            start += len;
        }
        let [train, valid, test] = parts;
        Self { train, valid, test }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that the splits partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = alloc::vec![false; n];
        for &i in self.train.iter().chain(&self.valid).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(CoreError::invalid("split indices must partition the rows"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(CoreError::invalid("split indices must cover every row"));
        }
        Ok(())
    }
}

/// Per-column affine normalization `(v - mean) / std`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Population mean and standard deviation of the selected rows. A zero
    /// standard deviation is replaced by 1 so the column is only centered.
    pub fn fit(data: &Tensor, rows: &[usize]) -> Self {
        let sub = data.select_rows(rows);
        let mean = sub.col_means();
        let k = rows.len().max(1) as f64;
        let std = (0..data.cols())
            .map(|c| {
                let var = (0..sub.rows()).map(|r| (sub[(r, c)] - mean[c]) * (sub[(r, c)] - mean[c])).sum::<f64>() / k;
                let s = math::sqrt(var);
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(cols: usize) -> Self {
        Self { mean: alloc::vec![0.0; cols], std: alloc::vec![1.0; cols] }
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        Tensor::from_fn(t.rows(), t.cols(), |r, c| (t[(r, c)] - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        Tensor::from_fn(t.rows(), t.cols(), |r, c| t[(r, c)] * self.std[c] + self.mean[c])
    }

    /// `Σ log std`, the log-Jacobian of denormalization.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|&s| math::log(s)).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x: ColumnStats,
    pub y: ColumnStats,
}

/// Raw `(x, y)` rows with splits and training-split normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub x: Tensor,
    pub y: Tensor,
    pub splits: Splits,
    pub norm: Normalization,
}

impl Dataset {
    /// Fits the normalization on the training split.
    pub fn new(x_names: Vec<String>, y_names: Vec<String>, x: Tensor, y: Tensor, splits: Splits) -> Result<Self> {
        let norm = Normalization { x: ColumnStats::fit(&x, &splits.train), y: ColumnStats::fit(&y, &splits.train) };
        Self::with_normalization(x_names, y_names, x, y, splits, norm)
    }

    pub fn with_normalization(x_names: Vec<String>, y_names: Vec<String>, x: Tensor, y: Tensor, splits: Splits, norm: Normalization) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(CoreError::invalid("x and y must have the same number of rows"));
        }
        if x_names.len() != x.cols() || y_names.len() != y.cols() {
            return Err(CoreError::invalid("column names do not match the data"));
        }
        if norm.x.mean.len() != x.cols() || norm.y.mean.len() != y.cols() || norm.x.std.len() != x.cols() || norm.y.std.len() != y.cols() {
            return Err(CoreError::invalid("normalization statistics do not match the data"));
        }
        if norm.x.std.iter().chain(&norm.y.std).any(|&s| !(s > 0.0)) {
            return Err(CoreError::invalid("normalization standard deviations must be positive"));
        }
        splits.validate(x.rows())?;
        Ok(Self { x_names, y_names, x, y, splits, norm })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn n(&self) -> usize {
        self.x.cols()
    }

    pub fn m(&self) -> usize {
        self.y.cols()
    }

    /// Normalized `(x, y)` rows of one split.
    pub fn part(&self, split: Split) -> (Tensor, Tensor) {
        let idx = self.splits.get(split);
        (self.norm.x.normalize(&self.x.select_rows(idx)), self.norm.y.normalize(&self.y.select_rows(idx)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_one_one_split_of_concrete_size() {
        let s = Splits::random(1030, [8, 1, 1], 3);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (824, 103, 103));
        s.validate(1030).unwrap();
        assert_eq!(s, Splits::random(1030, [8, 1, 1], 3));
        assert_ne!(s, Splits::random(1030, [8, 1, 1], 4));
    }

    #[test]
    fn nine_one_split_has_no_test_rows() {
        let s = Splits::random(95, [9, 1, 0], 1);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (85, 10, 0));
        s.validate(95).unwrap();
    }

    #[test]
    fn normalization_round_trip_and_training_stats() {
        let x = Tensor::from_fn(40, 3, |r, c| (r * (c + 1)) as f64 * 0.37 - 2.0);
        let y = Tensor::from_fn(40, 1, |_, _| 5.0);
        let ds = Dataset::new(alloc::vec!["a".into(), "b".into(), "c".into()], alloc::vec!["k".into()], x.clone(), y, Splits::random(40, [8, 1, 1], 0)).unwrap();
        let back = ds.norm.x.denormalize(&ds.norm.x.normalize(&x));
        assert!(back.sub(&x).max_abs() < 1e-12);
        let (xt, yt) = ds.part(Split::Train);
        for m in xt.col_means() {
            assert!(m.abs() < 1e-12);
        }
        assert_eq!(ds.norm.y.std, alloc::vec![1.0]);
        assert!(yt.max_abs() == 0.0);
    }

    #[test]
    fn streams_are_distinct() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }
}
