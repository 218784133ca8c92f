//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! Values live in [`Tensor`]s; a [`Tape`] records every primitive applied
//! to differentiable inputs and [`Tape::backward`] replays it in reverse.
//! Broadcasting is limited to [`Tape::broadcast_rows`] and
//! [`Tape::add_row`]; everything else needs matching shapes or an explicit
//! [`Tape::reshape`].

mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, GradCheckError, GradCheckReport};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}")]
    InvalidShape { op: &'static str, shape: Vec<usize> },
    #[error("tensor of shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("slice [{start}, {start}+{len}) out of range on axis {axis} of {shape:?}")]
    SliceOutOfRange { start: usize, len: usize, axis: usize, shape: Vec<usize> },
    #[error("{op}: no inputs")]
    EmptyInput { op: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}
