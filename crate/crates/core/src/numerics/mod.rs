//! Dense array math with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, check_gradients_multi, relative_error, CoordCheck, GradCheckReport,
    REL_ERR_FLOOR,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_softmax_slice, log_softmax_vec, softmax_vec, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{len} values do not fill shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite input value at flat index {index}")]
    NonFiniteInput { index: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op} on an empty input")]
    EmptyInput { op: &'static str },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("variable {id} does not belong to this tape")]
    UnknownVar { id: usize },
}
