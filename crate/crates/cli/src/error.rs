use std::path::PathBuf;

use esp_core::EspError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid value at `{path}`: {reason}")]
    Validation { path: String, reason: String },

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("computation failed: {0}")]
    Runtime(EspError),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Validation {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Attributes a library error to the scenario table `prefix`.
    pub fn from_core(prefix: &str, err: EspError) -> Self {
        match err {
            EspError::InvalidParameter { name, reason } => CliError::invalid(format!("{prefix}.{name}"), reason),
            EspError::DimensionMismatch(m) | EspError::Unsupported(m) => CliError::invalid(prefix, m),
            other => CliError::Runtime(other),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::Validation { .. } => 3,
            CliError::NotConverged(_) | CliError::Runtime(_) => 4,
            CliError::Io { .. } => 5,
        }
    }
}
