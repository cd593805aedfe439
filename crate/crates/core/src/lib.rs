//! Simulation and experiment toolkit for time-domain analog vector-matrix
//! multipliers built from single-transistor floating-gate cells.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod device;
pub mod error;
pub mod experiment;
pub mod extraction;
pub mod timeslot;
pub mod training;
pub mod vmm;

pub use error::{Error, Result};
