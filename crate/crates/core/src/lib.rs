//! Biomass estimation from multi-band rasters supervised by sparse lidar
//! footprints, built around an attention-gated UNet.

pub mod checks;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
