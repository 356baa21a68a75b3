//! Foveated retinal resampling and multi-scale cortical fragment sampling for
//! small convolutional classifiers, with a PGD-family adversarial robustness
//! harness.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod cortical;
pub mod error;
pub mod eval;
pub mod oracles;
pub mod params;
pub mod retinal;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
