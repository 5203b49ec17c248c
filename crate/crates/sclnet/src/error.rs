use std::path::Path;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

/// Failure of a command, split by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config file or output location; exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Anything that fails while running, including non-finite losses;
    /// exit code 3.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> CliError {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<sclnet_core::Error> for CliError {
    fn from(e: sclnet_core::Error) -> Self {
        match e {
            sclnet_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
