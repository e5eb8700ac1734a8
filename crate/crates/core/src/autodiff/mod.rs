//! Dense tensors with define-by-run reverse-mode differentiation.

pub mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use kernels::logistic;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
