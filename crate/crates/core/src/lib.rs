//! Ensemble-localized kernel density estimation and the ensemble Gaussian
//! mixture filter, with the spiral and Lorenz '63 benchmark harness.

// Parameter checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engmf;
pub mod error;
pub mod harness;
pub mod kde;
pub mod metrics;
pub mod numstat;
pub mod testbeds;

pub use error::{Error, Result};
