//! Spatial estimation of taxon composition from gridded and
//! township-level tree counts under a multinomial-probit model.

pub mod codec;
pub mod config;
pub mod error;
pub mod estimator;
pub mod grid;
pub mod io;
pub mod model;
pub mod normal;
pub mod precision;
pub mod prior;
pub mod rng;
pub mod scoring;
pub mod sampler;
pub mod simulate;
pub mod sparse;

pub use error::{Error, ErrorCategory, Result};
