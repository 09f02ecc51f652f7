//! Continuous Newton-type flows for nonlinear operator equations `F(x) = 0`.

// `!(x > 0.0)` is used deliberately so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod config;
pub mod error;
pub mod flows;
pub mod hilbert;
pub mod integrate;
pub mod problems;
pub mod runner;
pub mod schedules;
pub mod theory;

pub use error::{DsmError, Result};
