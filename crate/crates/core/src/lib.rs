//! Goal-oriented image transmission over a seeded, quantized noise space.
//!
//! A transmitter diffuses an image to its terminal latent, projects that
//! latent onto `n` Gaussian vectors regenerated from shared seeds, and sends
//! only the most significant weights plus the segmentation and edge
//! conditions. Because both endpoints hold the same denoiser, seeds, and
//! schedule, the transmitter can run the receiver's generation locally and
//! score it before anything crosses the link.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod goqos;
pub mod noise_codec;
pub mod numerics;
pub mod protocol;
pub mod scenes;

pub use error::{Error, Result};
