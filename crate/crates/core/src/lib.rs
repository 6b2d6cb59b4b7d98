//! Simulation and estimation toolkit for extremum estimators whose true
//! parameter sits on the boundary of the parameter space.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod gig;
pub mod harness;
pub mod limitfield;
pub mod linalg;
pub mod localsets;
pub mod mixedmodel;
mod opt;
pub mod seed;
pub mod specfun;
pub mod stats;

pub use error::{Error, Result};
