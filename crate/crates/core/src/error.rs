use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("{op}: input mask has no valid position")]
    NoValidData { op: &'static str },

    #[error("fill_until_valid: {remaining} positions still invalid after {iters} passes")]
    FillExhausted { iters: usize, remaining: usize },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward: loss must be a scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` is not connected to the loss")]
    DetachedParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("infeasible mask policy: {0}")]
    InfeasiblePolicy(String),

    #[error("tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
