//! Dense tensors with reverse-mode automatic differentiation, sized for
//! CPU-scale model experiments.
//!
//! The pieces:
//!
//! - [`Tensor`]: row-major n-d array over `f32` or `f64`, recording a
//!   gradient tape as ops run. `backward()` on a scalar fills `grad` for
//!   every `requires_grad` ancestor.
//! - [`ParamStore`] / [`AdamW`]: named parameters with a frozen set the
//!   optimizer never touches.
//! - [`grad_check`]: f64 central-difference verification of any scalar
//!   function of a store.
//! - [`checkpoint`]: a small binary container with bit-exact round trips.
//! - [`SeededRng`]: deterministic initialization and shuffling.
//!
//! Execution is single-threaded and deterministic: the same seed and inputs
//! produce the same bytes, which the training and evaluation layers above
//! rely on.

mod error;
mod gradcheck;
mod ops;
mod optim;
mod rng;
mod scalar;
mod tensor;

pub mod checkpoint;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, DEFAULT_EPS};
pub use ops::{gelu_f64, sigmoid_f64, stable_softplus};
pub use optim::{AdamW, ParamStore};
pub use rng::{derive_seed, init_gaussian, init_uniform, init_zero, SeededRng};
pub use scalar::{Dtype, Scalar};
pub use tensor::{
    finite_check_enabled, finite_checks, grad_enabled, no_grad, FiniteCheckGuard, NoGradGuard,
    Tensor,
};
