//! Crate-wide error type.
//!
//! Exit-code mapping used by the CLI: config/usage problems are
//! [`Error::Config`]-like (exit 2), everything that fails at run time
//! maps to exit 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Index (label, token id, position) outside its valid range.
    #[error("index error: {0}")]
    Index(String),

    /// An operation contract was violated (non-scalar backward root,
    /// missing gradients, invalid probability rows).
    #[error("contract error: {0}")]
    Contract(String),

    /// A value became NaN/Inf where the pipeline requires finite math.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Bad configuration: unknown keys, out-of-range hyperparameters,
    /// impossible strategy settings.
    #[error("config error: {0}")]
    Config(String),

    /// A forward-pass input violates the model's preconditions
    /// (all-pad rows, token ids beyond the vocabulary, overlong sequences).
    #[error("input error: {0}")]
    Input(String),

    /// Dataset-level problems: empty files, missing classes, unusable splits.
    #[error("data error: {0}")]
    Data(String),

    /// A malformed input file, with the offending line when known.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Pattern template referenced a placeholder the task cannot fill.
    #[error("template error: {0}")]
    Template(String),

    /// Training diverged or produced a non-finite loss.
    #[error("training error at epoch {epoch}, step {step}: {message}")]
    Training {
        epoch: usize,
        step: usize,
        message: String,
    },

    /// Aggregation/reporting failure (missing cells, empty groups).
    #[error("report error: {0}")]
    Report(String),

    /// Checkpoint file is corrupt or inconsistent with its config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Template(_) => 2,
            _ => 1,
        }
    }
}
