//! Contact-implicit system identification for rigid and articulated bodies.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod multibody;
pub mod nn;
pub mod par;
pub mod qp;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
