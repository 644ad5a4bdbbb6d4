use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] bitbudget_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("container {path}: {detail}")]
    Container { path: PathBuf, detail: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("hash mismatch for {file}: manifest has {expected}, file has {actual}")]
    HashMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("audit failed: {0}")]
    Audit(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
