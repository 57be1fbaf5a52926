use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit reports.
///
/// The variants are grouped by who is at fault: `Parameter`, `Contract`,
/// `Config`, `Validation`, `Format`, `Length` and `Parse` describe bad input,
/// while `Io` and `Internal` are environmental or programming faults.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument is outside its allowed domain (T <= 0, K > n, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Caller-side shape or precondition violation.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A reduction was asked for over zero rows.
    #[error("empty input: {0}")]
    EmptySet(String),

    /// A quantization configuration is missing an entry the network needs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A deserialized object violates one of its invariants.
    #[error("validation error in `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// A binary file does not start with the expected header.
    #[error("format error: {0}")]
    Format(String),

    /// A binary payload has the wrong size.
    #[error("length error: expected {expected} payload bytes, found {actual}")]
    Length { expected: u64, actual: u64 },

    /// Malformed JSON, with the location serde reports.
    #[error("parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error was caused by the caller's input rather than by
    /// the environment or a bug.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound
                    | std::io::ErrorKind::PermissionDenied
                    | std::io::ErrorKind::UnexpectedEof
                    | std::io::ErrorKind::InvalidData
            ),
            Error::Internal(_) => false,
            _ => true,
        }
    }
}
