use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SanError {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structural parameter (stride, size, ratio, ...) is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data is malformed or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// A degenerate numeric condition, e.g. cosine of a zero vector.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SanError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        SanError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SanError::Io {
            path: path.into(),
            source,
        }
    }
}
