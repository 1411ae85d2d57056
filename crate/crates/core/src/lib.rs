//! Masked multi-path Swin-Unet autoencoder for high-density surface EMG
//! gesture recognition.

pub mod autograd;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
