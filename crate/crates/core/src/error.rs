use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("loss must have a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op}: extents {h}x{w} are not powers of two")]
    NotPowerOfTwo { op: &'static str, h: usize, w: usize },

    #[error("{op}: imaginary residue {residue:e} exceeds tolerance")]
    ImaginaryResidue { op: &'static str, residue: f64 },

    #[error("sampling produced a non-finite value at step {step}")]
    SamplingDiverged { step: usize },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
