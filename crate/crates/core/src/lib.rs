//! Exemplar-based voxel detailization with a coarse-to-fine generator
//! pyramid.

pub mod augment;
pub mod autonet;
pub mod error;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod server;
pub mod trainer;
pub mod voxgrid;

pub use error::{Error, Result};
