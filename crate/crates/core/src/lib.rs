//! Magnitude-conditioned time-domain speech separation.
//!
//! The crate is organized the way the pipeline runs:
//!
//! - [`dsp`]: windows, STFT, magnitude, inverse STFT and WAV I/O.
//! - [`autodiff`]: the reverse-mode tape every learnable stage is built on.
//! - [`model`]: learnable encoder, attention-weighted magnitude branch,
//!   feature-wise modulation, dual-path transformer mask estimator and decoder.
//! - [`objectives`]: SI-SDR, SDR, permutation-invariant loss, improvements.
//! - [`datagen`]: synthetic harmonic mixtures with noise and reverberation.
//! - [`training`]: initialization, Adam, the training loop and checkpoints.

pub mod autodiff;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod model;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
