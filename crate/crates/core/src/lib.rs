//! Simulation and verification of finite-time energy-based stochastic state
//! reduction.
//!
//! Two independent routes produce reduction paths for a finite-dimensional
//! system: the closed-form [`exact`] route built from a sampled terminal
//! energy and a Brownian bridge, and the [`sde`] route integrating the
//! nonlinear stochastic Schrödinger equation directly. [`statistics`] turns
//! ensembles of either into pass/fail checks, and [`timechange`] relates the
//! finite-horizon clock to the asymptotic one.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod exact;
pub mod kernels;
pub mod sde;
pub mod statistics;
pub mod system;
pub mod timechange;

pub use error::{Error, Result};
