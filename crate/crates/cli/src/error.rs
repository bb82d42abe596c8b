use std::path::Path;

use thiserror::Error;

/// Failure of a command, classified for the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or config file.
    #[error("config error: {0}")]
    Config(String),
    /// Missing or malformed inputs on disk.
    #[error("data error: {0}")]
    Data(String),
    /// Anything failing while computing or writing results.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub const EXIT_CONFIG: i32 = 64;
    pub const EXIT_DATA: i32 = 65;
    pub const EXIT_RUNTIME: i32 = 70;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Data(_) => Self::EXIT_DATA,
            CliError::Runtime(_) => Self::EXIT_RUNTIME,
        }
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn data(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
