//! Desk-scale style-transfer pipelines: a pixel-space conditional diffusion
//! model with a grafted ControlNet branch, a CycleGAN baseline, Canny-edge
//! conditioning data, and a Fréchet-distance evaluation protocol.

pub mod controlnet;
pub mod cyclegan;
pub mod diffusion;
pub mod error;
pub mod fid;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};
