use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Dependency(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] dualfuse_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                dualfuse_core::Error::Diverged { .. } | dualfuse_core::Error::NonFinite { .. } => 4,
                dualfuse_core::Error::Config { .. } | dualfuse_core::Error::Vocabulary { .. } => 2,
                dualfuse_core::Error::Checkpoint(_) | dualfuse_core::Error::Parse { .. } => 3,
                _ => 1,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
