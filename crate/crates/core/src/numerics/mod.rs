//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, InputCheck};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{numel, Real, Tensor};

pub use graph::SNAKE_EPS;
