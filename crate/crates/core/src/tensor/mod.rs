//! Dense tensors, a tape-based reverse-mode autodiff graph, and a
//! finite-difference gradient checker.

mod dense;
mod error;
mod gemm;
mod gradcheck;
mod graph;
mod real;

pub use dense::Tensor;
pub use error::{Result, TensorError};
pub use gemm::{gemm, Trans};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Backward, Graph, UnfoldSpec, Var};
pub use real::{PrecisionMode, Real};

#[cfg(test)]
pub(crate) use graph::gelu;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
