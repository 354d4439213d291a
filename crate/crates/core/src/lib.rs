//! Numerical toolkit for the stochastic maximum principle of control problems
//! driven by Hilbert-space-valued continuous martingales.
//!
//! The state space K and the control space O are truncated to finite
//! dimensions. Drivers are finite sums of rank-one time-changed Brownian
//! martingales, so every run works under a Brownian filtration.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod dynamics;
pub mod error;
pub mod hilbert;
pub mod martingale;
pub mod pmp;
pub mod problems;
pub mod regression;
pub mod report;
pub mod scenarios;
pub mod stats;

pub use error::{Error, Result};
