use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by the CLI to pick an exit code and message
/// prefix. Every `Error` variant maps to exactly one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Caller asked for something inconsistent or impossible.
    Config,
    /// The filesystem or a codec failed.
    Io,
    /// Data on disk is present but wrong (corrupt, mismatched, stale).
    Integrity,
    /// Training produced non-finite numbers and was aborted.
    Divergence,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Integrity => "integrity",
            ErrorCategory::Divergence => "divergence",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Integrity(_) => ErrorCategory::Integrity,
            Error::Divergence(_) => ErrorCategory::Divergence,
            // Tensor shape/dtype mismatches mean the caller wired modules
            // together with incompatible dimensions.
            Error::Tensor(_) => ErrorCategory::Config,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}
