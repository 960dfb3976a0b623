use thiserror::Error;

use crate::fixed_point::SolverTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("channel {channel} has degenerate mean {mean:e}; cannot AC/DC normalize")]
    DegenerateChannel { channel: usize, mean: f64 },

    #[error("no pulse signal: spectrum is empty inside the search band")]
    NoSignal,

    #[error("non-finite values in {0}")]
    Numeric(String),

    #[error("fixed-point solver produced non-finite iterate at iteration {iteration}")]
    SolverDiverged { iteration: usize, trace: SolverTrace },

    #[error("checkpoint format version mismatch: expected {expected:?}, found {found:?}")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("malformed record file: {0}")]
    Format(String),

    #[error("gradient check failed: relative error {rel_err:e} exceeds {tolerance:e} ({what})")]
    GradientCheck { what: String, rel_err: f64, tolerance: f64 },

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::Dimension {
            context,
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}
