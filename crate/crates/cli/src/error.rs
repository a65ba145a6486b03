//! Failure categories of the command-line tool and their exit codes.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// Failure categories of a run; each maps to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid, inconsistent or unreadable configuration (exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// Training or evaluation produced a non-finite value (exit code 3).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Reading or writing a file failed, or an input file is malformed
    /// (exit code 4).
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

impl From<wpgd_core::Error> for CliError {
    fn from(err: wpgd_core::Error) -> Self {
        use wpgd_core::Error as E;
        match err {
            E::NonFinite(_) => CliError::Numeric(err.to_string()),
            E::Io { path, source } => CliError::io(path, source),
            E::Parse { ref path, .. } => CliError::io(path.clone(), &err),
            _ => CliError::Config(err.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Config(err.to_string())
    }
}
