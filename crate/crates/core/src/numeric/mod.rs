//! Tensors, tape-based gradients, Adam, and the finite-difference oracle.

pub mod adam;
pub mod finite_diff;
pub mod tape;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use finite_diff::{compare_grads, finite_diff_grad, finite_diff_grad_masked, GradCheck};
pub use tape::{Op, ParamId, Tape, Var};
pub use tensor::{argmax, argmin, Precision, Real, Tensor};
