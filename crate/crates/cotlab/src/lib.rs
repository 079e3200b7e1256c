//! Experiment harness for PCP-Map and COT-Flow: dataset files, checkpoints,
//! hyperparameter search, evaluation and reporting.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod harness;
pub mod hexfloat;
pub mod model;
pub mod report;
pub mod search;

pub use error::{Error, Result};
