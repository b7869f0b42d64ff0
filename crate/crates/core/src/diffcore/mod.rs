//! Dense tensors with a reverse-mode gradient tape.
//!
//! The op set is exactly what the SCPC graph uses: strided convolution,
//! matrix products, elementwise arithmetic and nonlinearities, reductions,
//! cumulative sums, cosine similarity, softmax cross-entropy and
//! `stop_gradient`. Everything is stored as `f64`.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, COSINE_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}, expected {expected}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, expected: String },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: zero-norm vector at row {row}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{op}: input outside the domain at index {index}")]
    Domain { op: &'static str, index: usize },
    #[error("{op}: index {index} out of range for {len} elements")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    Detached,
    #[error("backward already ran on this tape")]
    BackwardTwice,
}
