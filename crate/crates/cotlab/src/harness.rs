//! Two-stage random search: short pilot runs over sampled tuples, then
//! repeated full training of the best ones.
//!
//! Seeds: `derive_seed(master, PILOT)` → `derive_seed(·, tuple)` for pilot
//! runs; `derive_seed(master, FULL)` → `derive_seed(·, tuple)` →
//! `derive_seed(·, repeat)` for full runs, where `tuple` is the index in the
//! sampled list. Tuple sampling itself uses `derive_seed(master, SPACE)`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cotlab_core::data::{derive_seed, Dataset};
use cotlab_core::train::TrainReport;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ExperimentConfig, Hyper, ModelKind, Task, TrainBudget};
use crate::dataset_io::{write_json, SidecarNorm};
use crate::error::{Error, Result};
use crate::model::{Metrics, Model};
use crate::search::sample_space;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

const SPACE: u64 = 0;
const PILOT: u64 = 1;
const FULL: u64 = 2;

/// Worker pool bounded by `COTLAB_WORKERS` (default: available cores).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let workers = match std::env::var("COTLAB_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Error::Validation(format!("COTLAB_WORKERS must be a positive integer, got {v:?}"))),
        },
        Err(_) => std::thread::available_parallelism().map_or(1, usize::from),
    };
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| Error::Validation(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pilot,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    /// Training hit a non-finite loss; the best earlier parameters were kept.
    Diverged,
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub phase: Phase,
    pub task: Task,
    pub model: ModelKind,
    pub hyper: Hyper,
    pub budget: TrainBudget,
    pub tuple: usize,
    pub repeat: usize,
    pub seed: u64,
    /// One report per trained block (two for joint models).
    pub curves: Vec<TrainReport>,
    /// Sum of the blocks' best validation losses.
    pub valid_loss: Option<f64>,
    pub metrics: Option<Metrics>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_s: f64,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.json", self.run_id));
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

/// What one run should do beyond training.
struct Job<'a> {
    phase: Phase,
    hyper: &'a Hyper,
    tuple: usize,
    repeat: usize,
    seed: u64,
    budget: TrainBudget,
    checkpoint_dir: Option<&'a Path>,
}

fn run_job(cfg: &ExperimentConfig, ds: &Dataset, norm: Option<&SidecarNorm>, job: Job<'_>) -> RunRecord {
    let start = Instant::now();
    let run_id = match job.phase {
        Phase::Pilot => format!("pilot-{:04}", job.tuple),
        Phase::Full => format!("full-{:04}-r{}", job.tuple, job.repeat),
    };
    let mut rec = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        run_id,
        phase: job.phase,
        task: cfg.task,
        model: cfg.model,
        hyper: job.hyper.clone(),
        budget: job.budget,
        tuple: job.tuple,
        repeat: job.repeat,
        seed: job.seed,
        curves: vec![],
        valid_loss: None,
        metrics: None,
        checkpoint: None,
        wall_clock_s: 0.0,
        status: RunStatus::Ok,
    };
    let outcome = (|| -> Result<()> {
        let (model, reports) = Model::train(job.hyper, cfg.task, ds, job.budget, job.seed)?;
        rec.valid_loss = reports.iter().map(|r| r.best_valid).sum::<Option<f64>>().filter(|v| v.is_finite());
        let diverged = reports.iter().any(TrainReport::diverged);
        rec.curves = reports;
        if diverged || rec.valid_loss.is_none() {
            rec.status = RunStatus::Diverged;
            return Ok(());
        }
        if let Some(dir) = job.checkpoint_dir {
            let path = dir.join(format!("{}.ckpt.json", rec.run_id));
            checkpoint::save(&path, &model, Some(job.hyper.clone()), norm.cloned())?;
            rec.checkpoint = Some(path);
        }
        if job.phase == Phase::Full {
            let model = model.with_nt(cfg.eval.nt);
            rec.metrics = Some(model.evaluate(ds, cfg.eval.mmd_rows, &cfg.eval.sample, derive_seed(job.seed, 0x6576))?);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.status = RunStatus::Failed { message: e.to_string() };
    }
    rec.wall_clock_s = start.elapsed().as_secs_f64();
    rec
}

/// Pilot stage result: records in sampling order and the ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotResult {
    pub records: Vec<RunRecord>,
    /// Tuple indices, best validation loss first; failed and diverged
    /// runs come last in sampling order.
    pub ranking: Vec<usize>,
}

impl PilotResult {
    pub fn top(&self, k: usize) -> Vec<(usize, Hyper)> {
        self.ranking.iter().take(k).map(|&i| (i, self.records[i].hyper.clone())).collect()
    }
}

/// Orders runs by validation loss; unusable runs go last.
pub fn rank_records(records: &[RunRecord]) -> Vec<usize> {
    let key = |r: &RunRecord| if r.is_ok() { r.valid_loss } else { None };
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| match (key(&records[a]), key(&records[b])) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    idx
}

/// Samples `cfg.pilot.tuples` tuples and trains each for the pilot epochs.
/// Records go to `out_dir/pilot/` when given.
pub fn pilot_search(cfg: &ExperimentConfig, ds: &Dataset, seed: u64, out_dir: Option<&Path>, pool: &rayon::ThreadPool) -> Result<PilotResult> {
    let space = cfg.space.resolve(cfg.model)?;
    let tuples = sample_space(&space, cfg.model, ds.m(), cfg.pilot.tuples, derive_seed(seed, SPACE))?;
    pilot_tuples(cfg, ds, &tuples, seed, out_dir, pool)
}

/// The pilot stage over an explicit tuple list.
pub fn pilot_tuples(cfg: &ExperimentConfig, ds: &Dataset, tuples: &[Hyper], seed: u64, out_dir: Option<&Path>, pool: &rayon::ThreadPool) -> Result<PilotResult> {
    let budget = TrainBudget { epochs: cfg.pilot.epochs, ..cfg.train };
    let base = derive_seed(seed, PILOT);
    let records: Vec<RunRecord> = pool.install(|| {
        tuples
            .par_iter()
            .enumerate()
            .map(|(i, h)| {
                let job = Job { phase: Phase::Pilot, hyper: h, tuple: i, repeat: 0, seed: derive_seed(base, i as u64), budget, checkpoint_dir: None };
                run_job(cfg, ds, None, job)
            })
            .collect()
    });
    let result = PilotResult { ranking: rank_records(&records), records };
    if let Some(dir) = out_dir {
        let dir = dir.join("pilot");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for r in &result.records {
            r.save(&dir)?;
        }
        write_json(&dir.join("ranking.json"), &result.ranking)?;
    }
    Ok(result)
}

/// Mean and sample standard deviation of one tuple's repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleSummary {
    pub tuple: usize,
    pub hyper: Hyper,
    pub repeats: usize,
    pub failed: usize,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub mmd_mean: f64,
    pub mmd_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Best,
    Median,
    Worst,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::Best, Statistic::Median, Statistic::Worst];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Best => "best",
            Statistic::Median => "median",
            Statistic::Worst => "worst",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullResult {
    pub model: ModelKind,
    pub task: Task,
    pub records: Vec<RunRecord>,
    /// Tuples with at least one successful repeat, by mean test NLL.
    pub summaries: Vec<TupleSummary>,
    /// Best, median and worst entries of `summaries`; empty when every
    /// tuple failed.
    pub rows: Vec<(Statistic, TupleSummary)>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Best, median (lower middle for an even count) and worst of summaries
/// sorted by mean NLL.
pub fn select_rows(sorted: &[TupleSummary]) -> Vec<(Statistic, TupleSummary)> {
    if sorted.is_empty() {
        return vec![];
    }
    let idx = [0, (sorted.len() - 1) / 2, sorted.len() - 1];
    Statistic::ALL.iter().zip(idx).map(|(&s, i)| (s, sorted[i].clone())).collect()
}

/// Trains each tuple `cfg.repeats` times and evaluates test NLL and MMD.
/// Checkpoints and records go to `out_dir/full/` when given.
pub fn full_training(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    norm: Option<&SidecarNorm>,
    tuples: &[(usize, Hyper)],
    seed: u64,
    out_dir: Option<&Path>,
    pool: &rayon::ThreadPool,
) -> Result<FullResult> {
    let dir = out_dir.map(|d| d.join("full"));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let base = derive_seed(seed, FULL);
    let jobs: Vec<(usize, &Hyper, usize)> = tuples.iter().flat_map(|(i, h)| (0..cfg.repeats).map(move |r| (*i, h, r))).collect();
    let records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, h, r)| {
                let seed = derive_seed(derive_seed(base, i as u64), r as u64);
                let job = Job { phase: Phase::Full, hyper: h, tuple: i, repeat: r, seed, budget: cfg.train, checkpoint_dir: dir.as_deref() };
                run_job(cfg, ds, norm, job)
            })
            .collect()
    });
    let mut summaries = Vec::new();
    for (i, h) in tuples {
        let ok: Vec<&Metrics> = records.iter().filter(|r| r.tuple == *i).filter_map(|r| r.metrics.as_ref().filter(|_| r.is_ok())).collect();
        if ok.is_empty() {
            continue;
        }
        let (nll_mean, nll_std) = mean_std(&ok.iter().map(|m| m.test_nll).collect::<Vec<_>>());
        let (mmd_mean, mmd_std) = mean_std(&ok.iter().map(|m| m.mmd).collect::<Vec<_>>());
        summaries.push(TupleSummary { tuple: *i, hyper: h.clone(), repeats: ok.len(), failed: cfg.repeats - ok.len(), nll_mean, nll_std, mmd_mean, mmd_std });
    }
    summaries.sort_by(|a, b| a.nll_mean.total_cmp(&b.nll_mean));
    let result = FullResult { model: cfg.model, task: cfg.task, rows: select_rows(&summaries), summaries, records };
    if let Some(d) = &dir {
        for r in &result.records {
            r.save(d)?;
        }
        write_json(&d.join("summary.json"), &result)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(tuple: usize, nll: f64) -> TupleSummary {
        let hyper = Hyper::Pcp { batch_size: 32, learning_rate: 0.01, width: 32, context: 32, depth: 2 };
        TupleSummary { tuple, hyper, repeats: 1, failed: 0, nll_mean: nll, nll_std: 0.0, mmd_mean: 0.0, mmd_std: 0.0 }
    }

    #[test]
    fn one_tuple_gives_identical_rows() {
        let rows = select_rows(&[summary(0, 1.0)]);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|(_, s)| s.tuple == 0));
    }

    #[test]
    fn rows_are_ordered() {
        let rows = select_rows(&[summary(3, -1.0), summary(1, 0.0), summary(0, 0.5), summary(2, 2.0)]);
        let v: Vec<f64> = rows.iter().map(|(_, s)| s.nll_mean).collect();
        assert_eq!(v, vec![-1.0, 0.0, 2.0]);
    }

    #[test]
    fn sample_std_uses_all_repeats() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
