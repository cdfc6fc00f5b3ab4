use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("goal {goal} unreachable inside the feature box (max attainable score {max_score})")]
    Infeasible { goal: f64, max_score: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingCheckpoint(_) | Error::Parse { .. } => 2,
            Error::Divergence(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
