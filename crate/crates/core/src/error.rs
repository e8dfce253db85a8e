use dre_autograd::GraphError;
use thiserror::Error;

use crate::objective::LossBreakdown;

#[derive(Debug, Error)]
pub enum DreError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0} is unsupported for this model")]
    UnsupportedModel(String),
    #[error("no valid pairs could be formed: {0}")]
    EmptyPairs(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("training diverged at step {step}; last finite breakdown: {last:?}")]
    Divergence { step: usize, last: Option<LossBreakdown> },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DreError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        DreError::Input(msg.into())
    }

    /// Process exit code: 2 for input and configuration problems, 3 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DreError::Numeric(_) | DreError::Divergence { .. } => 3,
            DreError::Graph(GraphError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DreError>;
