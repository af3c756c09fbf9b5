use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFY_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NOT_CONVERGED: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: u64,
        column: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{command}: {source}")]
    Numerical {
        command: &'static str,
        #[source]
        source: markov_geometry::Error,
    },

    #[error("verification failed: {0} of 13 criteria did not pass")]
    VerifyFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerifyFailed(_) => exit::VERIFY_FAILED,
            CliError::Numerical {
                source: markov_geometry::Error::NotConverged { .. },
                ..
            } => exit::NOT_CONVERGED,
            _ => exit::USAGE,
        }
    }

    pub(crate) fn input(path: &std::path::Path, message: impl Into<String>) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Attaches a command name to library errors.
pub(crate) trait Context<T> {
    fn during(self, command: &'static str) -> Result<T, CliError>;
}

impl<T> Context<T> for markov_geometry::Result<T> {
    fn during(self, command: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Numerical { command, source })
    }
}
