use std::fmt;

use thiserror::Error;

/// A single configuration violation, named by the JSON path of the field.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfigViolation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("batch statistics need at least 2 samples, got {0}")]
    DegenerateBatch(usize),

    #[error("synthesis diverged at iteration {iteration} (cluster {cluster}): {detail}")]
    SynthesisDivergence {
        cluster: usize,
        iteration: usize,
        detail: String,
    },

    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigViolation>),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short stable name of the error class, used for CLI exit reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) | Error::ShapeMismatch { .. } | Error::DegenerateBatch(_) => "input",
            Error::SynthesisDivergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
