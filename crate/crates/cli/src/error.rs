use std::path::PathBuf;

use thiserror::Error;

/// Harness errors, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("weight file error: {0}")]
    Weights(String),

    #[error("malformed {what} in {path}: {detail}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("integrity failure: {0}")]
    Integrity(String),

    #[error(transparent)]
    Core(#[from] convguard::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use convguard::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Weights(_) | CliError::Parse { .. } => 3,
            CliError::Integrity(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) | E::Unsupported(_) | E::FaultSpec(_) => 2,
                E::NonFinite { .. } => 3,
                E::Integrity { .. } | E::Internal(_) => 4,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
