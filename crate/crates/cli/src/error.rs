use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure categories of the command line, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error [{invariant}]: {detail}")]
    Validation { invariant: String, detail: String },

    #[error("numerical failure [{kind}]: {0}", kind = .0.kind())]
    Numerical(mfcap::Error),

    #[error("I/O error on {}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn validation(invariant: impl Into<String>, detail: impl Into<String>) -> Self {
        CliError::Validation {
            invariant: invariant.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Validation { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 4,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Parse(_) => "ParseError",
            CliError::Validation { .. } => "ValidationError",
            CliError::Numerical(_) => "NumericalError",
            CliError::Io { .. } => "IoError",
        }
    }
}

impl From<mfcap::Error> for CliError {
    fn from(e: mfcap::Error) -> Self {
        if e.is_validation() {
            CliError::validation(e.kind(), e.to_string())
        } else {
            CliError::Numerical(e)
        }
    }
}
