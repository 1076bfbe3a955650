//! Latent-domain audio denoising workbench.
//!
//! The crate covers the full desk-scale pipeline: synthesizing degraded/clean
//! paired datasets from user-supplied (or generated) audio, encoding waveforms
//! through a pluggable frozen codec, training a latent U-Net denoiser with a
//! multi-objective loss curriculum, and evaluating with objective metrics
//! (SNR, SI-SDR, STOI).
//!
//! Data-parallel inner loops (convolutions, dataset generation, per-file
//! evaluation) run on rayon when the `parallel` feature is enabled (default)
//! and fall back to sequential loops otherwise. Results are bitwise identical
//! either way: parallel units write disjoint output regions and reductions
//! keep a fixed order.

pub mod audio;
pub mod autodiff;
pub mod codec;
pub mod config;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod real;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
