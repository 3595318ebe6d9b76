//! Minimal reverse-mode automatic differentiation over dense tensors.

mod check;
mod graph;
mod kernels;
mod tensor;

pub use check::{
    autodiff_grad, extrapolated_diff_check, extrapolated_grad, finite_diff_check, max_relative_error, numeric_grad, ridders, ScalarFn,
    extrapolate,
};
pub use graph::{Gradients, Graph, Segment, Var};
pub use tensor::{lit, ParamId, Scalar, Tensor};
