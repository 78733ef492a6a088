use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The interchange header could not be parsed or is inconsistent.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A tensor violates a content invariant (non-finite element, bad metadata).
    #[error("invalid tensor `{tensor}`: {message}")]
    Validation { tensor: String, message: String },

    /// The data block is shorter than the header declares.
    #[error("truncated data block: header declares {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input for which an operation is mathematically undefined, e.g. the
    /// rank rule applied to an all-zero spectrum.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure in `{tensor}`: {message}")]
    Numerical { tensor: String, message: String },
}

/// Coarse error classes used for reporting and CLI exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Format,
    Validation,
    Io,
    Shape,
    Argument,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Format { .. } => ErrorKind::Format,
            Error::Validation { .. } => ErrorKind::Validation,
            Error::Truncated { .. } | Error::Io { .. } => ErrorKind::Io,
            Error::Shape(_) => ErrorKind::Shape,
            Error::Argument(_) => ErrorKind::Argument,
            Error::Degenerate(_) | Error::Numerical { .. } => ErrorKind::Numerical,
        }
    }

    /// 1 for validation, format and I/O failures, 2 for numerical ones.
    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            ErrorKind::Numerical => 2,
            _ => 1,
        }
    }

    /// Attaches a tensor name to a numerical error raised by a routine that
    /// only sees the bare matrix.
    pub fn in_tensor(self, name: &str) -> Self {
        match self {
            Error::Numerical { tensor, message } if tensor.is_empty() => Error::Numerical {
                tensor: name.to_string(),
                message,
            },
            Error::Validation { tensor, message } if tensor.is_empty() => Error::Validation {
                tensor: name.to_string(),
                message,
            },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
