//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{analytic_grads, grad_check, grad_check_many};
pub use ops::{transpose_matrix, Reduction};
pub use tape::{Function, GradMap, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
