//! Synthetic privileged-information distillation for self-supervised image
//! encoders: procedural paired data, image translators, Siamese and
//! three-branch joint-embedding objectives, training, and evaluation.

pub mod datamodel;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod sslcore;
pub mod train;
pub mod translate;

pub use error::{Error, Result};
pub use image::ImageTensor;
