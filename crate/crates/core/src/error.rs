use std::io;

use thiserror::Error;

/// Library-wide error type.
///
/// Variants are grouped so the CLI can map them onto its exit codes:
/// validation problems, I/O and format problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid block plan: {0}")]
    Plan(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Broad category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dimension(_) | Error::InvalidArgument(_) | Error::Plan(_) => {
                ErrorKind::Validation
            }
            Error::Io(_) | Error::Format(_) | Error::Csv(_) => ErrorKind::Io,
            Error::Numeric(_) => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numeric,
}

pub type Result<T> = std::result::Result<T, Error>;
