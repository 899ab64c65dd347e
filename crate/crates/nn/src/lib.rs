//! Minimal reverse-mode autodiff over dense tensors, with the layers needed
//! for small convolutional encoders and image-to-image generators.

pub mod conv;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::AdamW;
pub use params::{kaiming_uniform, uniform, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
