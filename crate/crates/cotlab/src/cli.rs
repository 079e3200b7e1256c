//! Command-line surface. Every command writes into `--out-dir`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cotlab_core::cot;
use cotlab_core::data::{
    assemble_lv, derive_seed, gaussian_bench, lv_draw, lv_summary, gillespie_lv, stream_rng, preprocess_uci, GaussianBenchSpec, LvConfig, LvParams,
    UciOptions, UciTask,
};
use cotlab_core::metrics::{ks_uniformity, sbc_ranks};
use cotlab_core::pcp;
use cotlab_core::Tensor;
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset_io::{read_dataset, read_table, write_dataset, write_json, write_matrix};
use crate::error::{Error, Result};
use crate::harness::{full_training, pilot_search, worker_pool, FullResult, Phase, RunRecord, RunStatus, RECORD_SCHEMA_VERSION};
use crate::model::{eval_split, Model};
use crate::report::{self, config_hash, MetricRecord, NtError};

#[derive(Debug, Parser)]
#[command(name = "cotlab", version, about = "Conditional optimal transport experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, visible_alias = "out", global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Preprocess a raw numeric CSV into a dataset.
    Prepare {
        #[arg(long, visible_alias = "csv")]
        input: PathBuf,
        #[arg(long, value_parser = ["joint", "conditional"], default_value = "conditional")]
        task: String,
        /// Extra columns to drop as discrete.
        #[arg(long, value_delimiter = ',')]
        discrete: Vec<String>,
        #[arg(long, default_value_t = 0.98)]
        correlation_threshold: f64,
    },
    /// Simulate the stochastic Lotka-Volterra model under its prior.
    SimulateLv {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        max_events: usize,
        /// Also simulate one observation at these rates (comma separated).
        #[arg(long, value_delimiter = ',', num_args = 4)]
        observe: Option<Vec<f64>>,
    },
    /// Draw the joint-Gaussian benchmark.
    GenGauss {
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        /// JSON `{n, m, mean, cov}`; the built-in three-dimensional benchmark
        /// when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Pilot search followed by full training of the top tuples.
    Search,
    /// Fully train the configured tuple once.
    Train,
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Conditioning value in data coordinates (comma separated).
        #[arg(long, value_delimiter = ',')]
        y: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 30)]
        bins: usize,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Calibration pairs for simulation-based calibration (0 skips it).
        #[arg(long, default_value_t = 0)]
        sbc_pairs: usize,
        #[arg(long, default_value_t = 100)]
        sbc_draws: usize,
    },
    /// Collect `*/full/summary.json` under `--out-dir` into tables.
    Report,
}

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    std::fs::create_dir_all(&c.out_dir).map_err(|e| Error::io(&c.out_dir, e))?;
    match &cli.command {
        Command::Prepare { input, task, discrete, correlation_threshold } => {
            let table = read_table(input)?;
            let mut opts = UciOptions::new(if task == "joint" { UciTask::Joint } else { UciTask::Conditional });
            opts.discrete = discrete.clone();
            opts.correlation_threshold = *correlation_threshold;
            opts.seed = c.seed;
            let (ds, rep) = preprocess_uci(&table, &opts)?;
            let name = input.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
            let extra = serde_json::json!({ "source": input, "preprocessing": rep });
            write_dataset(&ds, &c.out_dir.join(format!("{name}.csv")), Some(extra))
        }
        Command::SimulateLv { n, max_events, observe } => {
            if *n == 0 {
                return Err(Error::Validation("--n must be positive".into()));
            }
            let cfg = LvConfig { max_events: *max_events, ..LvConfig::default() };
            let pool = worker_pool()?;
            let draws = pool.install(|| (0..*n as u64).into_par_iter().map(|i| lv_draw(c.seed, i, &cfg)).collect::<cotlab_core::Result<Vec<_>>>())?;
            let lv = assemble_lv(&draws, c.seed)?;
            let truncated = lv.truncated.iter().filter(|t| **t).count();
            let extra = serde_json::json!({ "simulator": cfg, "truncated": truncated });
            write_dataset(&lv.dataset, &c.out_dir.join("lv.csv"), Some(extra))?;
            if let Some(rates) = observe {
                let params = LvParams { rates: [rates[0], rates[1], rates[2], rates[3]] };
                params.validate()?;
                let series = gillespie_lv(&params, &cfg, &mut stream_rng(c.seed, u64::MAX))?;
                let summary = lv_summary(&series.s1, &series.s2, cfg.variance_floor)?;
                let names: Vec<String> = lv.dataset.y_names.clone();
                write_matrix(&c.out_dir.join("lv_observation.csv"), &names, &Tensor::row_vector(&summary))?;
            }
            Ok(())
        }
        Command::GenGauss { n, spec } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let raw: GaussianBenchSpec = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
                    if raw.cov.data().len() != raw.cov.rows() * raw.cov.cols() {
                        return Err(Error::Validation("cov data does not match its shape".into()));
                    }
                    GaussianBenchSpec::new(raw.n, raw.m, raw.mean, raw.cov)?
                }
                None => GaussianBenchSpec::standard(),
            };
            let bench = gaussian_bench(&spec, *n, c.seed)?;
            let extra = serde_json::json!({ "gaussian": spec });
            write_dataset(&bench.dataset, &c.out_dir.join("gauss.csv"), Some(extra))
        }
        Command::Search => {
            let cfg = load_config(c)?;
            let (ds, side) = read_dataset(&cfg.dataset)?;
            let pool = worker_pool()?;
            let pilot = pilot_search(&cfg, &ds, c.seed, Some(&c.out_dir), &pool)?;
            let top = pilot.top(cfg.top_k);
            let full = full_training(&cfg, &ds, Some(&side.normalization), &top, c.seed, Some(&c.out_dir), &pool)?;
            if full.rows.is_empty() {
                return Err(Error::Numerical("every full-training run failed".into()));
            }
            write_metrics(&c.out_dir, &cfg, &full)?;
            report::emit_report(&c.out_dir, &[(dataset_name(&cfg.dataset), full)])
        }
        Command::Train => {
            let cfg = load_config(c)?;
            let hyper = cfg.hyper.clone().ok_or_else(|| Error::Validation("train needs a `hyper` tuple in the config".into()))?;
            let (ds, side) = read_dataset(&cfg.dataset)?;
            let start = std::time::Instant::now();
            let (model, curves) = Model::train(&hyper, cfg.task, &ds, cfg.train, c.seed)?;
            if curves.iter().any(|r| r.diverged()) {
                return Err(Error::Numerical("training diverged".into()));
            }
            let ckpt = c.out_dir.join("model.ckpt.json");
            checkpoint::save(&ckpt, &model, Some(hyper.clone()), Some(side.normalization.clone()))?;
            let metrics = model.clone().with_nt(cfg.eval.nt).evaluate(&ds, cfg.eval.mmd_rows, &cfg.eval.sample, derive_seed(c.seed, 0x6576))?;
            let rec = RunRecord {
                schema_version: RECORD_SCHEMA_VERSION,
                run_id: "train".into(),
                phase: Phase::Full,
                task: cfg.task,
                model: cfg.model,
                hyper,
                budget: cfg.train,
                tuple: 0,
                repeat: 0,
                seed: c.seed,
                valid_loss: curves.iter().map(|r| r.best_valid).sum(),
                curves,
                metrics: Some(metrics),
                checkpoint: Some(ckpt),
                wall_clock_s: start.elapsed().as_secs_f64(),
                status: RunStatus::Ok,
            };
            rec.save(&c.out_dir)?;
            report::write_loss_curves(&c.out_dir.join("loss_curves.csv"), std::slice::from_ref(&rec))?;
            let hash = config_hash(&cfg);
            let records = [
                MetricRecord { metric: "test_nll".into(), value: metrics.test_nll, std: None, config_hash: hash.clone() },
                MetricRecord { metric: "mmd".into(), value: metrics.mmd, std: None, config_hash: hash },
            ];
            write_json(&c.out_dir.join("metrics.json"), &records)
        }
        Command::Sample { checkpoint: path, y, count, bins } => {
            let ck = checkpoint::load(path, None)?;
            let cfg = c.config.as_ref().map(|p| ExperimentConfig::load(p)).transpose()?;
            let sample_cfg = cfg.map(|c| c.eval.sample).unwrap_or_default();
            let norm = ck.normalization.as_ref().ok_or_else(|| Error::Validation("checkpoint has no normalization statistics".into()))?;
            let (nx, ny) = (norm.x.decode()?, norm.y.decode()?);
            let (xs, ys) = match (&ck.model, y) {
                (m, Some(y)) => {
                    if y.len() != ny.mean.len() {
                        return Err(Error::Validation(format!("--y needs {} values", ny.mean.len())));
                    }
                    let yn = ny.normalize(&Tensor::row_vector(y));
                    let yr = Tensor::from_fn(*count, yn.cols(), |_, j| yn.data()[j]);
                    let d = m.sample_rows(&yr, c.seed, &sample_cfg)?;
                    if d.non_converged > 0 {
                        eprintln!("warning: {} inversions did not reach the tolerance", d.non_converged);
                    }
                    (d.x, None)
                }
                (m, None) if m.is_joint() => {
                    let (yg, d) = m.sample_joint(*count, c.seed, &sample_cfg)?;
                    (d.x, Some(yg))
                }
                _ => return Err(Error::Validation("conditional models need --y".into())),
            };
            if !xs.is_finite() {
                return Err(Error::Numerical("samples are not finite".into()));
            }
            let xs = nx.denormalize(&xs);
            let x_names: Vec<String> = (0..xs.cols()).map(|i| format!("x{}", i + 1)).collect();
            let mut hist = Vec::new();
            for (j, name) in x_names.iter().enumerate() {
                let col: Vec<f64> = (0..xs.rows()).map(|r| xs.row(r)[j]).collect();
                hist.extend(report::histogram(name, &col, *bins)?);
            }
            report::write_histogram(&c.out_dir.join("histogram.csv"), &hist)?;
            match ys {
                Some(yg) => {
                    let mut names = x_names;
                    names.extend((0..yg.cols()).map(|i| format!("y{}", i + 1)));
                    write_matrix(&c.out_dir.join("samples.csv"), &names, &Tensor::hcat(&[&xs, &ny.denormalize(&yg)]))
                }
                None => write_matrix(&c.out_dir.join("samples.csv"), &x_names, &xs),
            }
        }
        Command::Eval { checkpoint: path, sbc_pairs, sbc_draws } => {
            let cfg = load_config(c)?;
            let ck = checkpoint::load(path, Some(cfg.model))?;
            if ck.model.is_joint() != cfg.task.is_joint() {
                return Err(Error::Validation("checkpoint and config disagree on the task".into()));
            }
            let (ds, _) = read_dataset(&cfg.dataset)?;
            let model = ck.model.with_nt(cfg.eval.nt);
            let metrics = model.evaluate(&ds, cfg.eval.mmd_rows, &cfg.eval.sample, derive_seed(c.seed, 0x6576))?;
            let hash = config_hash(&cfg);
            let mut records = vec![
                MetricRecord { metric: "test_nll".into(), value: metrics.test_nll, std: None, config_hash: hash.clone() },
                MetricRecord { metric: "mmd".into(), value: metrics.mmd, std: None, config_hash: hash.clone() },
            ];
            let (x, y) = ds.part(eval_split(&ds));
            if let Model::Cot { params, .. } = &model {
                let rows = y.rows().min(cfg.eval.mmd_rows.max(1));
                let yr = y.slice_rows(0, rows);
                let z = pcp::standard_normal(rows, params.dims.n, derive_seed(c.seed, 0x6e74));
                let nts = [1, 2, 4, 8, 16];
                let errs = cot::nt_consistency(params, Some(&yr), &z, &nts, 32)?;
                let rows: Vec<NtError> = nts.iter().zip(errs).map(|(&nt, relative_error)| NtError { nt, relative_error }).collect();
                report::write_nt_errors(&c.out_dir.join("nt_errors.csv"), &rows)?;
            }
            if *sbc_pairs > 0 {
                if model.is_joint() {
                    return Err(Error::Validation("calibration needs a conditional model".into()));
                }
                let pairs = (*sbc_pairs).min(x.rows());
                let sampler = model.sampler(cfg.eval.sample);
                let sbc = sbc_ranks(&sampler, &x.slice_rows(0, pairs), &y.slice_rows(0, pairs), *sbc_draws, derive_seed(c.seed, 0x5bc))?;
                for (d, ks) in ks_uniformity(&sbc).into_iter().enumerate() {
                    records.push(MetricRecord { metric: format!("sbc_ks_{d}"), value: ks, std: None, config_hash: hash.clone() });
                }
                report::write_sbc(&c.out_dir.join("sbc_ecdf.csv"), &sbc)?;
            }
            write_json(&c.out_dir.join("metrics.json"), &records)
        }
        Command::Report => {
            let mut results = Vec::new();
            for summary in find_summaries(&c.out_dir)? {
                let text = std::fs::read_to_string(&summary).map_err(|e| Error::io(&summary, e))?;
                let full: FullResult = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", summary.display())))?;
                let root = summary.parent().and_then(Path::parent).unwrap_or(&c.out_dir);
                let name = if root == c.out_dir { "dataset".to_string() } else { root.file_name().map_or("dataset".into(), |s| s.to_string_lossy().into_owned()) };
                results.push((name, full));
            }
            report::emit_report(&c.out_dir, &results)
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let path = c.config.as_ref().ok_or_else(|| Error::Validation("this command needs --config".into()))?;
    ExperimentConfig::load(path)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
}

/// Per-dataset metrics with the configuration hash.
fn write_metrics(out: &Path, cfg: &ExperimentConfig, full: &FullResult) -> Result<()> {
    let hash = config_hash(cfg);
    let mut records = Vec::new();
    for (stat, s) in &full.rows {
        for (metric, value, std) in [("test_nll", s.nll_mean, s.nll_std), ("mmd", s.mmd_mean, s.mmd_std)] {
            records.push(MetricRecord { metric: format!("{metric}_{}", stat.name()), value, std: Some(std), config_hash: hash.clone() });
        }
    }
    write_json(&out.join("metrics.json"), &records)
}

/// `dir/full/summary.json` and `dir/*/full/summary.json`, sorted.
fn find_summaries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let direct = dir.join("full").join("summary.json");
    if direct.is_file() {
        out.push(direct);
    }
    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            subdirs.push(p);
        }
    }
    subdirs.sort();
    out.extend(subdirs.into_iter().map(|p| p.join("full").join("summary.json")).filter(|p| p.is_file()));
    Ok(out)
}
