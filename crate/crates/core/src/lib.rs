pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod degrade;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod prepare;
pub mod raster;
pub mod resample;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
