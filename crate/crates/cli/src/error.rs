use std::path::Path;

use thiserror::Error;

/// Process exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Process exit status for bad arguments, unreadable input or unwritable output.
pub const EXIT_USAGE: i32 = 2;
/// Process exit status for a non-finite numeric result.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] routegan_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(routegan_core::Error::NonFinite(_)) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// Wraps an IO error with the path it concerns.
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Adds the path to a core error raised while reading or writing it.
    pub fn at(path: &Path) -> impl FnOnce(routegan_core::Error) -> Self + '_ {
        move |e| match e {
            routegan_core::Error::Io(source) => CliError::Io {
                path: path.display().to_string(),
                source,
            },
            other => CliError::Core(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
