//! Reverse-mode differentiation and the dense kernels everything else uses.

pub mod gradcheck;
pub mod kernels;
mod lstm;
mod tape;
mod tensor;

pub use lstm::{lstm_cell, lstm_init, LstmVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
}
