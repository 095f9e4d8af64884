use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants are grouped by the exit code the command-line front end maps
/// them to (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("input too short for {op}: length {len} < kernel span {span}")]
    InputTooShort { op: &'static str, len: usize, span: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("degenerate speaker model for '{0}': centroid norm is ~0")]
    DegenerateModel(String),

    #[error("batch-norm layer '{0}' has no running statistics yet")]
    UninitializedStatistics(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: u64, detail: String },

    #[error("unsupported audio format in {path}: {field} is {found} (expected {expected})")]
    UnsupportedFormat {
        path: PathBuf,
        field: &'static str,
        found: String,
        expected: &'static str,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error: 2 configuration, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Shape { .. }
            | Error::Contract(_)
            | Error::Split(_)
            | Error::UninitializedStatistics(_) => 2,
            Error::TrainingDiverged { .. } => 4,
            Error::InputTooShort { .. }
            | Error::DegenerateEmbedding(_)
            | Error::DegenerateModel(_)
            | Error::UnsupportedFormat { .. }
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => 3,
        }
    }
}
