//! Dense float64 arrays with tape-based reverse-mode differentiation.
//!
//! The crate is deliberately small: a [`DenseArray`] value type, a [`Tape`]
//! that records the handful of operations a transformer needs, a
//! [`ParamStore`] of named learnable arrays, plain SGD and a finite-difference
//! gradient checker.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod params;
pub mod tape;

pub use array::DenseArray;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_array, CoordCheck, GradCheckOptions, GradCheckReport};
pub use kernels::sigmoid;
pub use params::{grad_norm, sgd_update, ParamStore};
pub use tape::{Gradients, Tape, Var};
