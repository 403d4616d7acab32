use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or input files.
    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] revpers::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Core(_) => 2,
            CliError::Io { .. } | CliError::Internal(_) => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { context: path.display().to_string(), source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
