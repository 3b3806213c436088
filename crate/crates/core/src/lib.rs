//! Patch-based depthwise-separable convolutional forecaster for long-horizon
//! multivariate time series, together with its data pipeline, training loop
//! and analysis tooling.

pub mod analysis;
pub mod config;
pub mod dataio;
pub mod error;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod training;

pub use error::{Error, Result};
