pub mod annotation;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod params;
#[cfg(test)]
mod properties;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
