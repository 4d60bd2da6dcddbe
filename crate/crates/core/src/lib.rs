//! Coarse-to-fine localisation of a position described in text inside a
//! city-scale point cloud.

pub mod coarse;
pub mod encoder;
pub mod error;
pub mod fine;
pub mod language;
pub mod nn;
pub mod pipeline;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
