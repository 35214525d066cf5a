use std::path::PathBuf;

/// Errors produced by the clustering engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    #[error("row {row} is all zeros and cannot be normalized")]
    DegenerateRow { row: usize },

    #[error("every sample in the batch was discarded (sum of weights is zero)")]
    AllSamplesDiscarded,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("truncated input at byte {offset}: missing {missing} bytes")]
    Truncated { offset: u64, missing: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
