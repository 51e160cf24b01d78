//! Minimal tape-based reverse-mode differentiation over `f64` arrays.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, check_param_gradients, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

