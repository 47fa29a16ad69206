//! Speech-driven lip editing with an audio-conditioned diffusion model.

pub mod audiofeat;
pub mod condnet;
pub mod config;
pub mod dataset;
pub mod dubber;
pub mod error;
pub mod metrics;
pub mod raster;
pub mod rng;
pub mod schedule;
pub mod synthgen;
pub mod trainer;
pub mod videoprep;

pub use error::{Error, Result};
