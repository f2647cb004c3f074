//! Refinement of coarse semantic voxel grids.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pnam;
pub mod tensor;
pub mod train;
pub mod unet3d;
pub mod vlgm;
pub mod voxio;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
