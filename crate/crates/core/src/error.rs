use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by the CLI to pick an exit code and by
/// traces to record what went wrong without carrying the whole error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Config,
    Data,
    Backend,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Backend => "backend",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("embedding failed for batch indices {indices:?}: {message}")]
    Embedding { indices: Vec<usize>, message: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("mock script has no entry for prompt sha256:{prompt_hash}")]
    ScriptedMiss { prompt_hash: String },

    #[error("uncertainty is undefined for a generation without token logprobs")]
    UndefinedUncertainty,

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Usage(_) => ErrorCategory::Usage,
            Error::Config(_) => ErrorCategory::Config,
            Error::Embedding { .. } | Error::Generation(_) | Error::ScriptedMiss { .. } => {
                ErrorCategory::Backend
            }
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::Index(_)
            | Error::Template(_)
            | Error::UndefinedUncertainty
            | Error::Contract(_)
            | Error::Io { .. } => ErrorCategory::Data,
        }
    }
}
