//! Null-control laboratory for the clamped Kuramoto–Sivashinsky–KdV equation
//! coupled to an elliptic (or relaxed parabolic) equation on (0,1).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod banded;
pub mod carleman_diag;
pub mod cli;
pub mod discretization;
pub mod dynamics;
pub mod error;
pub mod fixed_point;
pub mod hum;
pub mod source_term;

pub use error::{Error, Result};
