//! Experiment configuration. The JSON layout is described by
//! `schema/config.v1.schema.json`.

use std::path::PathBuf;

use cotlab_core::cot::FlowConfig;
use cotlab_core::pcp::{PcpTrainConfig, SampleConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::SearchSpace;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Density of `(x, y)` through a block-triangular map.
    Joint,
    /// Density of `x | y`.
    Conditional,
    /// Posterior of simulator parameters `x` given observations `y`.
    Lfi,
}

impl Task {
    pub fn is_joint(self) -> bool {
        self == Task::Joint
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pcp,
    Cot,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pcp => "pcp",
            ModelKind::Cot => "cot",
        }
    }
}

/// One hyperparameter tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Hyper {
    Pcp { batch_size: usize, learning_rate: f64, width: usize, context: usize, depth: usize },
    Cot { batch_size: usize, learning_rate: f64, width: usize, nt: usize, alpha1: f64, alpha2: f64, embed: Option<[usize; 2]> },
}

/// Training budget shared by every run of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBudget {
    pub epochs: usize,
    pub patience: usize,
    /// Optimizer steps between validation checks; 0 means once per epoch.
    pub val_interval: usize,
}

impl Hyper {
    pub fn kind(&self) -> ModelKind {
        match self {
            Hyper::Pcp { .. } => ModelKind::Pcp,
            Hyper::Cot { .. } => ModelKind::Cot,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Hyper::Pcp { batch_size, .. } | Hyper::Cot { batch_size, .. } => *batch_size,
        }
    }

    pub fn pcp_config(&self, budget: TrainBudget, seed: u64) -> Option<PcpTrainConfig> {
        match *self {
            Hyper::Pcp { batch_size, learning_rate, width, context, depth } => Some(PcpTrainConfig {
                batch_size,
                learning_rate,
                epochs: budget.epochs,
                depth,
                width,
                context: Some(context),
                seed,
                val_interval: budget.val_interval,
                patience: budget.patience,
            }),
            Hyper::Cot { .. } => None,
        }
    }

    pub fn flow_config(&self, budget: TrainBudget, seed: u64) -> Option<FlowConfig> {
        match *self {
            Hyper::Cot { batch_size, learning_rate, width, nt, alpha1, alpha2, embed } => Some(FlowConfig {
                nt,
                alpha1,
                alpha2,
                width,
                batch_size,
                learning_rate,
                epochs: budget.epochs,
                seed,
                embed: embed.map(|[h, o]| (h, o)),
                val_interval: budget.val_interval,
                patience: budget.patience,
            }),
            Hyper::Pcp { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Hyper::Pcp { batch_size, learning_rate, width, context, depth } => {
                batch_size > 0 && learning_rate > 0.0 && width > 0 && context > 0 && depth >= 2
            }
            Hyper::Cot { batch_size, learning_rate, width, nt, alpha1, alpha2, embed } => {
                batch_size > 0
                    && learning_rate > 0.0
                    && width > 0
                    && nt > 0
                    && alpha1 > 0.0
                    && alpha2 >= 0.0
                    && embed.map_or(true, |[h, o]| h > 0 && o > 0)
            }
        };
        if ok && self.learning_rate().is_finite() {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid hyperparameters {self:?}")))
        }
    }

    fn learning_rate(&self) -> f64 {
        match self {
            Hyper::Pcp { learning_rate, .. } | Hyper::Cot { learning_rate, .. } => *learning_rate,
        }
    }
}

/// Pilot stage budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotBudget {
    pub tuples: usize,
    pub epochs: usize,
}

/// Either a named preset or an explicit space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceChoice {
    Preset(String),
    Custom(SearchSpace),
}

impl SpaceChoice {
    pub fn resolve(&self, kind: ModelKind) -> Result<SearchSpace> {
        match self {
            SpaceChoice::Custom(s) => Ok(s.clone()),
            SpaceChoice::Preset(name) => SearchSpace::preset(name, kind),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Cap on the rows used for the MMD estimate.
    #[serde(default = "default_mmd_rows")]
    pub mmd_rows: usize,
    /// Time steps for flow evaluation; the training value when absent.
    #[serde(default)]
    pub nt: Option<usize>,
    #[serde(default)]
    pub sample: SampleConfig,
}

fn default_mmd_rows() -> usize {
    1000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mmd_rows: default_mmd_rows(), nt: None, sample: SampleConfig::default() }
    }
}

fn default_top_k() -> usize {
    10
}

fn default_repeats() -> usize {
    2
}

fn default_space() -> SpaceChoice {
    SpaceChoice::Preset("default".into())
}

fn default_pilot() -> PilotBudget {
    PilotBudget { tuples: 100, epochs: 15 }
}

fn default_budget() -> TrainBudget {
    TrainBudget { epochs: 100, patience: 10, val_interval: 0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: Task,
    pub model: ModelKind,
    /// Dataset CSV; its sidecar JSON sits next to it.
    pub dataset: PathBuf,
    #[serde(default = "default_space")]
    pub space: SpaceChoice,
    #[serde(default = "default_pilot")]
    pub pilot: PilotBudget,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_budget")]
    pub train: TrainBudget,
    /// Fixed tuple for the `train` command.
    #[serde(default)]
    pub hyper: Option<Hyper>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if !(self.pilot.tuples >= self.top_k && self.top_k >= 1) {
            return Err(Error::Validation("need pilot.tuples >= top_k >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Validation("repeats must be at least 1".into()));
        }
        if let Some(h) = &self.hyper {
            h.validate()?;
            if h.kind() != self.model {
                return Err(Error::Validation("hyper does not match the model kind".into()));
            }
        }
        self.eval.sample.validate()?;
        self.space.resolve(self.model)?.validate(self.model)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"schema_version":1,"task":"conditional","model":"pcp","dataset":"d.csv"}"#).unwrap();
        assert_eq!((cfg.top_k, cfg.repeats, cfg.pilot.tuples), (10, 2, 100));
        assert_eq!(cfg.space, SpaceChoice::Preset("default".into()));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            r#"{"schema_version":2,"task":"joint","model":"pcp","dataset":"d.csv"}"#,
            r#"{"schema_version":1,"task":"joint","model":"pcp","dataset":"d.csv","top_k":0}"#,
            r#"{"schema_version":1,"task":"joint","model":"pcp","dataset":"d.csv","pilot":{"tuples":3,"epochs":1}}"#,
            r#"{"schema_version":1,"task":"joint","model":"pcp","dataset":"d.csv","space":"nope"}"#,
            r#"{"schema_version":1,"task":"joint","model":"pcp","dataset":"d.csv","extra":1}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Validation(_))), "{text}");
        }
    }

    #[test]
    fn hyper_round_trips_through_json() {
        let h = Hyper::Cot { batch_size: 64, learning_rate: 0.01, width: 32, nt: 8, alpha1: 1.5, alpha2: 20.0, embed: Some([32, 64]) };
        let back: Hyper = serde_json::from_str(&serde_json::to_string(&h).unwrap()).unwrap();
        assert_eq!(h, back);
    }
}
