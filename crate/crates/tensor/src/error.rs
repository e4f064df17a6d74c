use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        msg: msg.into(),
    })
}
