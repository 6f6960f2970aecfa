//! Crate-wide error type with process exit-code mapping.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration: unknown keys, unparsable values, physically
    /// inconsistent combinations. Maps to exit code 1.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure with the offending path.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Malformed serialized data: PPM, manifest, checkpoint.
    #[error("format error: {0}")]
    Format(String),

    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values or other numerical breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 is success; 1 a validation error the user can fix; 2 a runtime or
    /// numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
