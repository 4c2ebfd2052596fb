//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_subset, GradCheckReport};
pub use graph::{Elementwise, Graph, Var, LOG_FLOOR};
pub use tensor::DiffTensor;
