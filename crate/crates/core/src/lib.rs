//! Cascaded two-hand interaction diffusion.
//!
//! A single denoising network learns both the unconditional single-hand
//! distribution and the distribution of one hand conditioned on the other
//! (via conditioning dropout). Sampling runs the two in cascade with
//! classifier-free and anti-penetration guidance. The crate also ships the
//! evaluation metric suite, a plug-in diffusion prior regularizer and a
//! synthetic two-hand dataset so everything runs on a laptop.

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod hand;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod regularizer;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use hand::{HandParam, HAND_DIM};

/// Tool version echoed into every artifact manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
