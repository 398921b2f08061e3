use crate::tensor::fmt_shape;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operands of a tensor op do not fit together; names both shapes.
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A precondition on an argument failed (bad split, bad config, ...).
    #[error("{0}")]
    InvalidArgument(String),

    /// A loss or gradient stopped being finite; carries the step index.
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },

    /// Lookup of an id that is not in the cache / passage store.
    #[error("unknown id {0}")]
    UnknownId(u64),

    /// A binary file failed structural validation (bad magic, truncation,
    /// inconsistent offsets).
    #[error("malformed file: {0}")]
    Format(String),

    /// The cache was built by a different model than the one serving it.
    #[error("model hash mismatch: cache was built with {cache:#018x}, current model is {model:#018x}")]
    HashMismatch { cache: u64, model: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: fmt_shape(lhs),
            rhs: fmt_shape(rhs),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
