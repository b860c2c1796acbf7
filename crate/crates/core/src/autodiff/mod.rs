//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, finite_diff_gradient, GradCheckReport};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

/// Norm floor used by every L2 normalization in the crate.
pub const NORM_EPS: f64 = 1e-12;
