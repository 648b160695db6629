use std::path::PathBuf;

use thiserror::Error;

/// Command failures, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input artifact {}: {hint}", path.display())]
    MissingInput { path: PathBuf, hint: String },
    #[error(transparent)]
    Runtime(#[from] promptforge::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput { .. } => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
