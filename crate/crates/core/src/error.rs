//! Crate-wide error type.
//!
//! Variants are grouped by how the command-line layer maps them to exit
//! codes: configuration/argument problems, data problems (files, labels,
//! shapes of on-disk artifacts), and numeric failures (non-finite losses).

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes that cannot be combined; names the op and both shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor with the wrong shape for an operation.
    #[error("{op}: expected shape {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    /// Invalid argument values (ranges, counts, identical arrangement rules...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A request that exceeds what the data can provide (episode sampling).
    #[error("capacity: {0}")]
    Capacity(String),

    /// Configuration file / CLI parameter validation failures.
    #[error("config: {0}")]
    Config(String),

    /// Problems with on-disk data, naming the offending file.
    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values where finite ones are required; aborts training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An optimizer step was asked to update a parameter that has no gradient.
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
