use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RmlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RmlError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("view {view}: expected {expected} columns, got {got}")]
    ViewShape {
        view: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("infeasible perturbation: {0}")]
    Infeasible(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient check invalid: {0}")]
    CheckInvalid(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RmlError {
    /// Stable short tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            RmlError::Shape { .. } => "shape",
            RmlError::ViewShape { .. } => "shape",
            RmlError::Config(_) => "config",
            RmlError::Degenerate(_) => "degenerate",
            RmlError::Infeasible(_) => "infeasible",
            RmlError::NonFinite(_) => "non_finite",
            RmlError::CheckInvalid(_) => "check_invalid",
            RmlError::Contract(_) => "contract",
            RmlError::Data(_) => "data",
            RmlError::Stratification(_) => "stratification",
            RmlError::Checkpoint(_) => "checkpoint",
            RmlError::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        RmlError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RmlError::Io {
            path: path.into(),
            source,
        }
    }
}
