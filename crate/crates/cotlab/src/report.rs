//! Result tables and plot series as CSV, plus JSON metric records.

use std::path::Path;

use cotlab_core::metrics::SbcResult;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{FullResult, RunRecord};

/// One row of the results table: a (dataset, model, statistic) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub statistic: String,
    pub tuple: usize,
    pub repeats: usize,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub mmd_mean: f64,
    pub mmd_std: f64,
}

pub const RESULT_HEADER: [&str; 9] = ["dataset", "model", "statistic", "tuple", "repeats", "nll_mean", "nll_std", "mmd_mean", "mmd_std"];

pub fn result_rows(dataset: &str, full: &FullResult) -> Vec<ResultRow> {
    full.rows
        .iter()
        .map(|(stat, s)| ResultRow {
            dataset: dataset.into(),
            model: full.model.name().into(),
            statistic: stat.name().into(),
            tuple: s.tuple,
            repeats: s.repeats,
            nll_mean: s.nll_mean,
            nll_std: s.nll_std,
            mmd_mean: s.mmd_mean,
            mmd_std: s.mmd_std,
        })
        .collect()
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    Ok(w)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = writer(path, header)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Writes the results table; an empty slice gives a header-only file.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_rows(path, &RESULT_HEADER, rows)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub run_id: String,
    /// Index of the trained block: 0 for `x | y`, 1 for the marginal of `y`.
    pub block: usize,
    pub split: String,
    pub step: usize,
    pub loss: f64,
}

pub fn curve_points(records: &[RunRecord]) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for r in records {
        for (block, c) in r.curves.iter().enumerate() {
            for (split, pts) in [("train", &c.train), ("valid", &c.valid)] {
                out.extend(pts.iter().map(|&(step, loss)| CurvePoint { run_id: r.run_id.clone(), block, split: split.into(), step, loss }));
            }
        }
    }
    out
}

pub fn write_loss_curves(path: &Path, records: &[RunRecord]) -> Result<()> {
    write_rows(path, &["run_id", "block", "split", "step", "loss"], &curve_points(records))
}

pub fn read_loss_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    read_rows(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NtError {
    pub nt: usize,
    pub relative_error: f64,
}

pub fn write_nt_errors(path: &Path, rows: &[NtError]) -> Result<()> {
    write_rows(path, &["nt", "relative_error"], rows)
}

pub fn read_nt_errors(path: &Path) -> Result<Vec<NtError>> {
    read_rows(path)
}

/// Empirical CDF of the normalized SBC ranks against the uniform CDF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbcPoint {
    pub dim: usize,
    pub rank: usize,
    pub ecdf: f64,
    pub uniform: f64,
}

pub fn sbc_points(sbc: &SbcResult) -> Vec<SbcPoint> {
    let l = sbc.draws;
    (0..sbc.dims())
        .flat_map(|d| {
            let ecdf = sbc.ecdf(d);
            (0..=l).map(move |r| SbcPoint { dim: d, rank: r, ecdf: ecdf[r], uniform: (r + 1) as f64 / (l + 1) as f64 })
        })
        .collect()
}

pub fn write_sbc(path: &Path, sbc: &SbcResult) -> Result<()> {
    write_rows(path, &["dim", "rank", "ecdf", "uniform"], &sbc_points(sbc))
}

pub fn read_sbc(path: &Path) -> Result<Vec<SbcPoint>> {
    read_rows(path)
}

/// Equal-width bins over `[lo, hi]`; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub column: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Bins every finite value of `values`; non-finite values are an error so
/// that counts always sum to the sample count.
pub fn histogram(column: &str, values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 || values.is_empty() {
        return Err(Error::Validation("histogram needs at least one bin and one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite sample in column {column:?}")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            column: column.into(),
            lo: lo + i as f64 * width,
            hi: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count,
        })
        .collect())
}

pub fn write_histogram(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    write_rows(path, &["column", "lo", "hi", "count"], bins)
}

pub fn read_histogram(path: &Path) -> Result<Vec<HistogramBin>> {
    read_rows(path)
}

/// A scalar metric tagged with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
    pub config_hash: String,
}

/// SHA-256 of the compact JSON form of `config`, in lowercase hex.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every file derivable from full-training results into `dir`.
pub fn emit_report(dir: &Path, results: &[(String, FullResult)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<ResultRow> = results.iter().flat_map(|(name, r)| result_rows(name, r)).collect();
    write_results(&dir.join("results.csv"), &rows)?;
    let records: Vec<RunRecord> = results.iter().flat_map(|(_, r)| r.records.iter().cloned()).collect();
    write_loss_curves(&dir.join("loss_curves.csv"), &records)
}
