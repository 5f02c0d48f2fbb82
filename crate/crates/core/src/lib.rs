//! Adversarially guided diffusion voice conversion against a speaker
//! classifier, on a synthetic speaker world.

pub mod bench;
pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod decoder;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod grad;
pub mod pgd;
pub mod rng;
pub mod train;
pub mod world;

pub use error::{Error, Result};
