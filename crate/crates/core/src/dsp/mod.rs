//! Deterministic signal-processing primitives: windows, STFT, magnitude,
//! inverse STFT for diagnostics, and mono WAV I/O.

mod stft;
mod wav;
mod window;

pub use stft::{
    istft, magnitude, stft, stft_frame_count, ComplexSpectrogram, MagnitudeSpectrogram,
};
pub use wav::{wav_read, wav_write, wav_write_as, WavEncoding};
pub use window::{hamming_window, rectangular_window, Window};

use crate::error::{Error, Result};

/// Sample rate used throughout the separation pipeline.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// A mono real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must hold at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("waveform sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Keeps the first `len` samples.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.samples.len() {
            return Err(Error::invalid(format!(
                "cannot truncate {} samples to {len}",
                self.samples.len()
            )));
        }
        Ok(Self {
            samples: self.samples[..len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}
