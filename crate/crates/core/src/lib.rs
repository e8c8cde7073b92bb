//! Point-cloud 6D pose estimation: reverse-mode autodiff, geometry,
//! local embedding, geometry-aware transformer encoder, pose head,
//! synthetic data, and metrics.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
