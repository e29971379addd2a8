use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NcfrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config value for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {path} (line {line}): {reason}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, NcfrError>;

impl NcfrError {
    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        NcfrError::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NcfrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        NcfrError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
