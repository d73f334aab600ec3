//! Dense matrices and a reverse-mode differentiation tape sized for small MLPs.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub(crate) use matrix::{dot, norm2};
pub use tape::{
    softmax_rows, Adjoints, GradientStore, NodeId, ParamId, ParamSlot, Tape, LAYER_NORM_EPS,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("rows have unequal lengths")]
    RaggedRows,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("loss must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &Matrix, rhs: &Matrix) -> Self {
        TensorError::ShapeMismatch {
            op,
            lhs: lhs.shape(),
            rhs: rhs.shape(),
        }
    }
}
