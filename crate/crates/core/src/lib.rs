pub mod adversarial;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod image;
pub mod kernels;
pub mod maskgen;
pub mod params;
pub mod primitives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
