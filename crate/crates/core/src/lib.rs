//! Differentiable cell search over a fixed set of candidate operations, with the tensor,
//! autodiff and layer machinery it needs, dynamic-image construction and the evaluation
//! pipeline for the resulting architectures.

pub mod config;
pub mod data;
pub mod dynimg;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod kernels;
pub mod manifest;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod search;
pub mod search_space;
pub mod tape;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use search_space::Genotype;
pub use tensor::Tensor;
