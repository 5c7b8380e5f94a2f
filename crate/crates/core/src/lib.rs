//! Null-control synthesis for the relaxed monodomain system.
//!
//! The crate discretizes the coupled parabolic system in space with finite
//! differences and in time with backward Euler, computes controls by
//! minimizing a penalized dual functional over adjoint terminal data, and
//! provides diagnostics (observability constants, weighted inequality
//! certificates, relaxation sweeps) around that pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod discretize;
pub mod dynamics;
pub mod error;
pub mod hum;
pub mod io;
pub mod model;
pub mod weights;

pub use error::{Error, Result};
