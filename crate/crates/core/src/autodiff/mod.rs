//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{
    gauss_log_density, log_sigmoid, sigmoid, BinaryOp, Gradients, Graph, NormMode, ReduceOp,
    RunningStats, UnaryOp, Var, NORM_EPS, NORM_MOMENTUM,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
