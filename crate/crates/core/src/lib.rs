//! Multimodal change detection for bi-temporal remote-sensing image pairs.

pub mod autograd;
pub mod data;
pub mod encoders;
pub mod error;
pub mod ifr;
pub mod itff;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod primitives;
pub mod tde;
pub mod tensor;
pub mod training;
pub mod visualize;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Shape, Tensor};
