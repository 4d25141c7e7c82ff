use alloc::string::String;
use core::fmt;

use crate::tensor::Shape;

/// Errors surfaced by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensor shapes that were required to agree do not.
    ShapeMismatch {
        context: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// A structural precondition on an argument failed (sizes, ranges, modes).
    Invalid(String),
    /// Byte-level parse failure; `offset` is the position in the input buffer.
    Parse { offset: usize, message: String },
    /// Dataset-level problem (empty set, single-class labels, ...).
    Data(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(context: &'static str, lhs: &Shape, rhs: &Shape) -> Self {
        Error::ShapeMismatch {
            context,
            lhs: lhs.clone(),
            rhs: rhs.clone(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, lhs, rhs } => {
                write!(f, "{context}: shape mismatch {lhs} vs {rhs}")
            }
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            Error::Data(msg) => write!(f, "data error: {msg}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for Error {}
