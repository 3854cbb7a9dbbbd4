use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the library.
///
/// The CLI maps these onto exit codes: config/usage errors -> 1,
/// dataset/io errors -> 2, everything else -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint fingerprint mismatch: checkpoint {found}, config {expected} (pass --force to load anyway)")]
    FingerprintMismatch { expected: String, found: String },

    #[error("non-finite loss at epoch {epoch}, step {step} (pair seed {seed})")]
    NonFiniteLoss { epoch: usize, step: usize, seed: u64 },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
