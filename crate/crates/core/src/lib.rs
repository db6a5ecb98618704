//! Dynamic expectation maximization for identifying linear time-invariant
//! systems driven by colored noise.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod free_energy;
pub mod gencoord;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod order;
pub mod par;
pub mod simkit;

pub use error::{DemError, Result};
