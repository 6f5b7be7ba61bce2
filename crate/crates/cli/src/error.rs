//! CLI error taxonomy mapped to process exit codes: 1 usage, 2 I/O, 3
//! capacity, 4 config mismatch.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Capacity(String),
    ConfigMismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Capacity(_) => 3,
            CliError::ConfigMismatch(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::Capacity(m) => write!(f, "{m}"),
            CliError::ConfigMismatch(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<cpd_core::Error> for CliError {
    fn from(err: cpd_core::Error) -> Self {
        match &err {
            cpd_core::Error::Capacity { .. } => CliError::Capacity(err.to_string()),
            cpd_core::Error::InvalidArgument(_) => CliError::Usage(err.to_string()),
            _ => CliError::Io(err.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
