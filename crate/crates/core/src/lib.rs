//! Multimodal fusion of satellite image time series with temporal attention.

pub mod analysis;
pub mod autograd;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod rng;
pub mod synthgen;
pub mod tasks;

pub use error::{Error, Result};
