//! Minimal reverse-mode differentiable tensor engine.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles and
//! replays them backwards from a scalar loss. Values are plain row-major
//! [`Tensor`]s with no aliasing.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, Var};
pub(crate) use graph::sigmoid;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}: empty input list")]
    Empty(&'static str),
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Self::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
