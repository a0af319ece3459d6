//! Trainable local Laplacian filter for grayscale style transfer.
//!
//! The filter's only behavioral knob is a scalar remap of the difference
//! between each pixel and its local Gaussian context. This crate learns that
//! remap (a three-parameter curve or a small MLP) together with an affine
//! output layer from paired images, and keeps the learned remap inspectable:
//! it can be exported as a curve and checked for monotonicity.

pub mod baseline;
pub mod error;
pub mod image;
pub mod imageio;
pub mod llf;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pyramid;
pub mod remap;
pub mod train;

pub use error::{LlfError, Result};
pub use image::Image;
