//! Blended latent diffusion video editing under attention control, built
//! from scratch at desk scale.
//!
//! Frames are encoded by an invertible patch codec, inverted along a DDIM
//! ladder with a toy text-conditioned denoiser, and re-generated under an
//! edit prompt. At every step the generated latent is blended with the
//! inverted background through a mask harvested from cross-attention.

pub mod attention_control;
pub mod autoencoder;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod scheduler;
pub mod tape;
pub mod temporal;

pub use error::{Error, Result};
