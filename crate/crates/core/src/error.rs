//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure, with the path that was being touched.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its bytes do not form a valid artifact.
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// A manifest or config document is missing or misusing a field.
    #[error("schema error: {0}")]
    Schema(String),

    /// Two records claim the same identity.
    #[error("conflict: {0}")]
    Conflict(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied argument is outside its valid range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input data violates a precondition (empty set, bad label, non-finite value).
    #[error("data error: {0}")]
    Data(String),

    /// Operation contract violated (incompatible class sets, too few devices).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training diverged or could not proceed.
    #[error("training error at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 1,
            Error::Training { .. } => 3,
            _ => 2,
        }
    }
}
