//! File formats, dataset storage, experiment driver and CLI support for
//! `geopose-core`.

pub mod config;
pub mod dataset;
pub mod depth;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod ply;
pub mod report;

pub use error::{Error, Result};
