//! Dense arrays with reverse-mode differentiation.

mod fd;
mod graph;
mod params;
mod tensor;

pub use fd::{central_difference, finite_difference_gradient, relative_error, REL_ERR_FLOOR};
pub use graph::{Graph, RowSource, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("softmax row {0} has every entry masked")]
    DegenerateRow(usize),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite function value {0}")]
    NonFinite(f64),
}
