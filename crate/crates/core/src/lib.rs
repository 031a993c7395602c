//! Latent-space energy-based controllable generation.
//!
//! Attribute classifiers are trained on the latent space of a fixed generator
//! and combined into energy functions `E(z, c) = Σ E(c_i | g(z)) + ½‖z‖²`.
//! Conditional samples are drawn with Langevin dynamics, a probability-flow
//! ODE (adaptive Dormand-Prince or fixed-step Euler) or a predictor-corrector
//! scheme, and checked against grid-quadrature and rejection-sampling oracles.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod classifier;
pub mod energy;
pub mod error;
pub mod eval;
pub mod ndmath;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod samplers;
pub mod worldgen;

pub use error::{Error, Result};
