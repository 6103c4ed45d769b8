//! Dense tensors and reverse-mode gradients.

mod ops;
mod tape;
mod tensor;

use thiserror::Error;

pub use ops::{
    dropout, gelu, layer_norm, masked_cross_entropy, masked_softmax, matmul, softmax, CrossEntropy,
    IGNORE_INDEX,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: dtype mismatch {left:?} vs {right:?}")]
    DTypeMismatch {
        op: &'static str,
        left: DType,
        right: DType,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("every label is the ignore index")]
    EmptyLabelSet,
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: i64, classes: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
