//! Dense tensors and a reverse-mode tape sized for small transformers.

mod check;
mod graph;
mod tensor;

pub use check::{check_gradients, GradCheck, FLOOR};
pub use graph::{causal_mask, softmax_in_place, Graph, Var, MASKED_SCORE};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
