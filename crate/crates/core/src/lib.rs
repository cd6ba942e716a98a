//! Exposure-distortion image classifier built from scratch: dense tensors,
//! hand-differentiated CNN layers, mini-batch SGD training, PPM image I/O,
//! a synthetic exposure-distortion dataset generator and a binary model format.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod model_io;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{
    init_params, model_backward, model_forward, param_count, InputSize, ModelConfig, ModelParams,
    Variant,
};
pub use tensor::{Scalar, Shape, Tensor};
