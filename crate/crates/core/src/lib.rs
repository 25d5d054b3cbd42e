//! Calibrated local stochastic intensity (LSI) models.
//!
//! The crate solves the leverage fixed point that makes a Cox-type jump
//! process with intensity `eta_t lambda(t, X_{t-}) / gamma_{X_{t-}}(t)` share
//! its one-dimensional marginals with the local intensity (LI) model of
//! intensity `lambda(t, X_{t-})`, simulates calibrated paths, and verifies
//! the result statistically.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod cox;
pub mod error;
pub mod eta;
pub mod fp_counting;
pub mod fp_general;
pub mod grid;
pub mod jumps;
pub mod lattice;
pub mod li_model;
pub mod oracle;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
