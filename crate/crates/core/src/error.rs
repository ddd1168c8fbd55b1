use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Missing or malformed manifest, checkpoint header or config file.
    #[error("format error: {0}")]
    Format(String),

    /// On-disk sizes disagree with what the manifest declares.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Values that violate a data invariant (non-finite features, bad labels).
    #[error("data error: {0}")]
    Data(String),

    /// Argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A non-finite value appeared during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("recycle error: {0}")]
    Recycle(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Oracle instance labels were required but are absent.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical divergence rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
