//! Dataset files: a CSV with a header row (x columns, then y columns) and a
//! sidecar JSON with the split indices and normalization statistics.

use std::path::{Path, PathBuf};

use cotlab_core::data::{ColumnStats, Dataset, Normalization, RawTable, Splits};
use cotlab_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexfloat;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexStats {
    pub mean: Vec<String>,
    pub std: Vec<String>,
}

impl HexStats {
    pub fn encode(s: &ColumnStats) -> Result<Self> {
        let enc = |v: &[f64]| v.iter().map(|x| hexfloat::format(*x).map_err(|e| Error::Validation(e.to_string()))).collect::<Result<Vec<_>>>();
        Ok(Self { mean: enc(&s.mean)?, std: enc(&s.std)? })
    }

    pub fn decode(&self) -> Result<ColumnStats> {
        let dec = |v: &[String]| v.iter().map(|x| hexfloat::parse(x).map_err(|e| Error::Validation(e.to_string()))).collect::<Result<Vec<_>>>();
        Ok(ColumnStats { mean: dec(&self.mean)?, std: dec(&self.std)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub x_columns: Vec<String>,
    pub y_columns: Vec<String>,
    pub splits: Splits,
    pub normalization: SidecarNorm,
    /// Generator-specific metadata, e.g. a benchmark spec or truncation flags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarNorm {
    pub x: HexStats,
    pub y: HexStats,
}

/// `data.csv` → `data.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_dataset(ds: &Dataset, csv_path: &Path, extra: Option<serde_json::Value>) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_err(csv_path, e))?;
    let header: Vec<&str> = ds.x_names.iter().chain(&ds.y_names).map(String::as_str).collect();
    w.write_record(&header).map_err(|e| csv_err(csv_path, e))?;
    for r in 0..ds.len() {
        let row: Vec<String> = ds.x.row(r).iter().chain(ds.y.row(r)).map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(|e| csv_err(csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let side = Sidecar {
        format_version: DATASET_FORMAT_VERSION,
        x_columns: ds.x_names.clone(),
        y_columns: ds.y_names.clone(),
        splits: ds.splits.clone(),
        normalization: SidecarNorm { x: HexStats::encode(&ds.norm.x)?, y: HexStats::encode(&ds.norm.y)? },
        extra,
    };
    write_json(&sidecar_path(csv_path), &side)
}

pub fn read_dataset(csv_path: &Path) -> Result<(Dataset, Sidecar)> {
    let side_path = sidecar_path(csv_path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", side_path.display())))?;
    if side.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Validation(format!("{}: unsupported format_version {}", side_path.display(), side.format_version)));
    }
    let table = read_table(csv_path)?;
    let (n, m) = (side.x_columns.len(), side.y_columns.len());
    let expected: Vec<&String> = side.x_columns.iter().chain(&side.y_columns).collect();
    if table.headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Validation(format!("{}: header does not match the sidecar columns", csv_path.display())));
    }
    let x = table.rows.slice_cols(0, n);
    let y = table.rows.slice_cols(n, m);
    let norm = Normalization { x: side.normalization.x.decode()?, y: side.normalization.y.decode()? };
    let ds = Dataset::with_normalization(side.x_columns.clone(), side.y_columns.clone(), x, y, side.splits.clone(), norm)?;
    Ok((ds, side))
}

/// A numeric CSV with a header row.
pub fn read_table(path: &Path) -> Result<RawTable> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::Validation(format!("{}: empty header", path.display())));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != headers.len() {
            return Err(Error::Validation(format!("{}: line {} has {} fields, expected {}", path.display(), i + 2, rec.len(), headers.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Validation(format!("{}: line {}, column {:?}: {field:?} is not a number", path.display(), i + 2, headers[c])))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(RawTable { rows: Tensor::from_vec(rows, headers.len(), data), headers })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: &Path, headers: &[String], t: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(headers).map_err(|e| csv_err(path, e))?;
    for r in 0..t.rows() {
        w.write_record(t.row(r).iter().map(|v| format!("{v:?}"))).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Validation(format!("{}: {e}", path.display()))
    }
}
