//! Learned image transmission over an AWGN channel with an iterative,
//! similarity-score-conditioned residual latent denoiser.

pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
mod kernels;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod training;
pub mod transmit;

pub use error::{Error, Result};
