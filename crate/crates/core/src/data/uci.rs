use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Dataset, Splits};
use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::Tensor;

/// A numeric table with column headers.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UciTask {
    /// `x` is the second half of the retained features.
    Joint,
    /// `x` is the last retained feature.
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UciOptions {
    pub task: UciTask,
    /// Columns treated as discrete in addition to the automatic rule.
    #[serde(default)]
    pub discrete: Vec<String>,
    #[serde(default = "default_threshold")]
    pub correlation_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    0.98
}

impl UciOptions {
    pub fn new(task: UciTask) -> Self {
        Self { task, discrete: Vec::new(), correlation_threshold: default_threshold(), seed: 0 }
    }
}

/// Which columns preprocessing removed, and why.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UciReport {
    pub discrete: Vec<String>,
    /// `(dropped, kept partner, correlation)`.
    pub correlated: Vec<(String, String, f64)>,
}

/// Integer-valued with at most two levels: indicator-like columns.
fn is_discrete(col: &[f64]) -> bool {
    if col.iter().any(|v| *v != math::round(*v)) {
        return false;
    }
    let mut levels: Vec<f64> = Vec::new();
    for &v in col {
        if !levels.contains(&v) {
            levels.push(v);
            if levels.len() > 2 {
                return false;
            }
        }
    }
    true
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let d = math::sqrt(saa * sbb);
    if d > 0.0 {
        sab / d
    } else {
        0.0
    }
}

/// Drops discrete columns and one column of every pair with signed Pearson
/// correlation above the threshold (the later column goes), assigns `x` and
/// `y` by task, splits 8:1:1 and normalizes with training statistics.
pub fn preprocess_uci(table: &RawTable, opts: &UciOptions) -> Result<(Dataset, UciReport)> {
    let (n, d) = table.rows.shape();
    if table.headers.len() != d {
        return Err(CoreError::invalid("header count does not match the columns"));
    }
    if n < 10 {
        return Err(CoreError::invalid("need at least 10 rows for an 8:1:1 split"));
    }
    if !table.rows.is_finite() {
        return Err(CoreError::invalid("table contains non-finite values"));
    }
    let cols: Vec<Vec<f64>> = (0..d).map(|c| (0..n).map(|r| table.rows[(r, c)]).collect()).collect();
    let mut report = UciReport::default();
    let mut kept: Vec<usize> = Vec::new();
    for c in 0..d {
        let name = &table.headers[c];
        if opts.discrete.contains(name) || is_discrete(&cols[c]) {
            report.discrete.push(name.clone());
            continue;
        }
        let partner = kept.iter().map(|&k| (k, pearson(&cols[k], &cols[c]))).find(|&(_, r)| r > opts.correlation_threshold);
        match partner {
            Some((k, r)) => report.correlated.push((name.clone(), table.headers[k].clone(), r)),
            None => kept.push(c),
        }
    }
    if kept.len() < 2 {
        return Err(CoreError::invalid("fewer than two columns remain after filtering"));
    }
    let split_at = match opts.task {
        UciTask::Joint => kept.len() / 2,
        UciTask::Conditional => kept.len() - 1,
    };
    let (ycols, xcols) = kept.split_at(split_at);
    let pick = |cs: &[usize]| Tensor::from_fn(n, cs.len(), |r, j| table.rows[(r, cs[j])]);
    let names = |cs: &[usize]| cs.iter().map(|&c| table.headers[c].clone()).collect::<Vec<_>>();
    let splits = Splits::random(n, [8, 1, 1], opts.seed);
    let ds = Dataset::new(names(xcols), names(ycols), pick(xcols), pick(ycols), splits)?;
    Ok((ds, report))
}
