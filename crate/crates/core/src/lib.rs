//! Numerical verification of decay rates for bottom-crossing probabilities of
//! symmetric jump processes.

pub mod cli;
pub mod constants;
pub mod error;
pub mod geometry;
pub mod hitting_bounds;
pub mod quad;
pub mod rate;
pub mod report;
pub mod simulate;
pub mod stats;
pub mod subordination;

pub use error::{Error, Result};
