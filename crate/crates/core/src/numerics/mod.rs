//! Tensors, reverse-mode differentiation, Adam and finite-difference checks.

mod adam;
mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use real::{lit, Real};
pub use tensor::Tensor;

pub(crate) use graph::{log_sum_exp, softmax_in_place};
