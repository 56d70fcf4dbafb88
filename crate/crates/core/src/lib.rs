//! Hierarchical clustered global context for invariant message-passing
//! interatomic potentials.

pub mod backbone;
pub mod cli;
pub mod cluster;
pub mod error;
pub mod geometry;
pub mod hierarchy;
pub mod moldata;
pub mod numcore;
pub mod readout;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
