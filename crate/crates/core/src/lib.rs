//! Runge-Kutta residual blocks for Transformer-style models.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every numerical
//! piece of the project:
//!
//! - [`ode`]: coefficient-table explicit Runge-Kutta integration and
//!   empirical order-of-convergence estimation.
//! - [`tensor`]: a dense tensor type with a tape-based reverse-mode
//!   autodiff engine, a named parameter store and a finite-difference
//!   gradient checker.
//! - [`blocks`]: the residual integration rules (Euler, the RK2 family,
//!   RK4, multistep schemas) applied over pre-norm attention / feed-forward
//!   sublayers.
//! - [`model`]: an encoder-decoder Transformer with ODE blocks on the
//!   encoder side and a causal language model built from the same blocks.
//! - [`train`]: Adam, the warmup / inverse-square-root schedule, label
//!   smoothing, gradient clipping and the training loop with telemetry.
//!
//! File formats, configuration parsing, task data and the CLI live in the
//! `odeformer` companion crate.
#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]
// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod blocks;
pub mod error;
pub mod model;
pub mod ode;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
