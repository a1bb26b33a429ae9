use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes incompatible with an operation.
    Shape { op: &'static str, detail: String },
    /// A configuration or argument field violated its invariant.
    Validation { field: String, reason: String },
    /// An operation that requires at least one element got none.
    Empty(&'static str),
    /// Cosine-based quantities are undefined for zero vectors.
    ZeroNorm,
    /// Covariance estimate is singular and no shrinkage was requested.
    DegenerateCovariance { samples: usize, dim: usize },
    /// Parameter containers disagree on names or shapes.
    ParamMismatch(Vec<String>),
    /// Training produced a NaN or infinite loss.
    NonFinite { step: usize, what: &'static str },
    /// An index (pyramid level, layer, ...) is out of range.
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Validation { field, reason } => write!(f, "invalid `{field}`: {reason}"),
            Error::Empty(what) => write!(f, "{what}: empty input"),
            Error::ZeroNorm => f.write_str("embedding has zero norm"),
            Error::DegenerateCovariance { samples, dim } => write!(
                f,
                "covariance of {samples} samples in dimension {dim} is degenerate; enable shrinkage"
            ),
            Error::ParamMismatch(entries) => {
                write!(f, "parameter mismatch: {}", entries.join(", "))
            }
            Error::NonFinite { step, what } => {
                write!(f, "non-finite {what} at step {step}; aborting")
            }
            Error::OutOfRange { what, index, len } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
        }
    }
}

impl core::error::Error for Error {}
