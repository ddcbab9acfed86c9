pub mod cli;
pub mod cluster;
pub mod config;
pub mod error;
pub mod evalquery;
pub mod fields;
pub mod losses;
pub mod raster;
pub mod scene;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
