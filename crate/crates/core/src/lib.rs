//! Coarse-to-fine prompt refinement for text-to-image models.

pub mod afem;
pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod evalhub;
pub mod gateway;
pub mod model;
pub mod nn;
pub mod raster;
pub mod sampler;
pub mod refiner;
pub mod seeds;
pub mod tensor;
pub mod textcore;
pub mod trainer;

pub use error::{Error, Result};
