use alloc::string::String;

use crate::autodiff::GraphError;
use crate::linalg::LinalgError;

/// Errors surfaced by model construction, training and sampling.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            CoreError::Invalid(_) => false,
            CoreError::Graph(g) => matches!(g, GraphError::NonFinite { .. } | GraphError::Linalg { .. }),
            CoreError::Linalg(_) | CoreError::NonFinite { .. } => true,
        }
    }
}

pub type Result<T> = core::result::Result<T, CoreError>;
