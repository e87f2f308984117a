pub mod defense;
pub mod diffusion;
pub mod error;
mod fft;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod personalization;
pub mod purification;
pub mod rng;

pub use error::{Error, Result};
pub use image::{Image, Shape};
