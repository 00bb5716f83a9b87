//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix shape disagreement.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value violated a numeric domain (non-finite input, sigma <= 0, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (backward on a non-scalar, uninitialized state, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration or arguments.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input file column missing from the header.
    #[error("missing column `{0}`")]
    MissingColumn(String),

    /// A timestamp field could not be parsed as ISO-8601.
    #[error("unparsable timestamp `{value}` at line {line}")]
    Timestamp { value: String, line: usize },

    /// Two rows share the same (time, station) key.
    #[error("duplicate (time, station) key: {timestamp} / {station}")]
    DuplicateKey { timestamp: String, station: String },

    /// A timestamp does not sit on the declared sampling grid.
    #[error("timestamp {0} is not aligned to the sampling frequency")]
    Alignment(String),

    /// A requested missing-data rate cannot be realized.
    #[error("requested rate {requested:.3} unreachable; maximum achievable is {max_achievable:.3}")]
    RateUnreachable { requested: f64, max_achievable: f64 },

    /// Training produced a non-finite loss or exploding gradients.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code for the CLI: 2 validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Io { .. } | Error::Csv(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
