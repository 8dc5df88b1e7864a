use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Peak amplitude of every synthesized source.
pub const SOURCE_PEAK: f64 = 0.9;

const MIN_F0: f64 = 50.0;
const MAX_F0: f64 = 400.0;

fn default_am_depth() -> f64 {
    0.5
}

/// Harmonic, speech-like source with a gliding pitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Fundamental at the start, Hz.
    pub f0_start: f64,
    /// Fundamental at the end, Hz (linear glide).
    pub f0_end: f64,
    pub harmonics: usize,
    /// Raised-cosine amplitude modulation rate, Hz; 0 disables it.
    pub am_rate: f64,
    /// Modulation depth in `[0, 1]`: the envelope swings between `1 - depth` and 1.
    #[serde(default = "default_am_depth")]
    pub am_depth: f64,
    /// Seconds.
    pub duration: f64,
    pub seed: u64,
}

impl SourceSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        for f0 in [self.f0_start, self.f0_end] {
            if !(MIN_F0..=MAX_F0).contains(&f0) {
                return Err(Error::invalid(format!(
                    "f0 {f0} Hz outside [{MIN_F0}, {MAX_F0}]"
                )));
            }
        }
        if self.harmonics == 0 {
            return Err(Error::invalid("a source needs at least one harmonic"));
        }
        let top = self.harmonics as f64 * self.f0_start.max(self.f0_end);
        let nyquist = sample_rate as f64 / 2.0;
        if top >= nyquist {
            return Err(Error::invalid(format!(
                "{} harmonics of {} Hz reach {top} Hz, at or above Nyquist {nyquist} Hz",
                self.harmonics,
                self.f0_start.max(self.f0_end)
            )));
        }
        if !(self.am_rate >= 0.0 && self.am_rate.is_finite())
            || !(0.0..=1.0).contains(&self.am_depth)
        {
            return Err(Error::invalid(
                "am_rate must be >= 0 and am_depth in [0, 1]",
            ));
        }
        duration_samples(self.duration, sample_rate)?;
        Ok(())
    }
}

fn duration_samples(duration: f64, sample_rate: u32) -> Result<usize> {
    let n = (duration * sample_rate as f64).round();
    if !(n >= 1.0 && n.is_finite()) {
        return Err(Error::invalid(format!(
            "duration {duration} s gives no samples at {sample_rate} Hz"
        )));
    }
    Ok(n as usize)
}

fn peak_normalize(mut samples: Vec<f64>, target: f64) -> Vec<f64> {
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = target / peak;
        samples.iter_mut().for_each(|v| *v *= g);
    }
    samples
}

/// Sum of harmonics `h = 1..=H` of a linearly gliding fundamental with
/// `1/h` amplitudes and seeded random phases, times a raised-cosine envelope,
/// peak-normalized to [`SOURCE_PEAK`].
pub fn synth_source(spec: &SourceSpec, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let len = duration_samples(spec.duration, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<f64> = (0..spec.harmonics)
        .map(|_| rng.gen_range(0.0..2.0 * PI))
        .collect();
    let sr = sample_rate as f64;
    let glide = (spec.f0_end - spec.f0_start) / spec.duration;
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            // Integral of the instantaneous fundamental from 0 to t.
            let cycles = spec.f0_start * t + 0.5 * glide * t * t;
            let tone: f64 = phases
                .iter()
                .enumerate()
                .map(|(i, &phi)| {
                    let h = (i + 1) as f64;
                    (2.0 * PI * h * cycles + phi).sin() / h
                })
                .sum();
            let env = 1.0 - spec.am_depth * 0.5 * (1.0 - (2.0 * PI * spec.am_rate * t).cos());
            tone * env
        })
        .collect();
    Waveform::new(peak_normalize(samples, SOURCE_PEAK), sample_rate)
}

/// Spectral colour of additive noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseColor {
    White,
    Pink,
}

/// Unit-variance noise of `len` samples.
///
/// White noise is i.i.d. standard normal; pink noise is white noise through a
/// parallel bank of first-order low-pass sections approximating a
/// -3 dB/octave slope, rescaled to unit variance.
pub fn synth_noise(color: NoiseColor, len: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::invalid("noise duration must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let samples = match color {
        NoiseColor::White => white,
        NoiseColor::Pink => {
            let mut b = [0.0f64; 7];
            let pink: Vec<f64> = white
                .iter()
                .map(|&w| {
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let out = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362;
                    b[6] = w * 0.115926;
                    out
                })
                .collect();
            let rms = (pink.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
            pink.into_iter().map(|v| v / rms).collect()
        }
    };
    Waveform::new(samples, sample_rate)
}

/// Exponentially decaying room impulse response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RirSpec {
    /// Time for a 60 dB energy decay, seconds.
    pub t60: f64,
    /// Direct-to-reverberant energy ratio in dB; absent means no tail.
    #[serde(default)]
    pub drr_db: Option<f64>,
    /// Response length in samples, direct path included.
    pub length: usize,
    pub seed: u64,
}

impl RirSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t60 > 0.0 && self.t60.is_finite()) || self.length == 0 {
            return Err(Error::invalid("rir needs t60 > 0 and length >= 1"));
        }
        if matches!(self.drr_db, Some(d) if !d.is_finite()) {
            return Err(Error::invalid("rir drr_db must be finite"));
        }
        Ok(())
    }
}

/// Unit direct path at sample 0 followed by Gaussian noise under the
/// amplitude envelope `exp(-6.9 t / t60)`, scaled so the direct-to-tail
/// energy ratio equals `drr_db`.
pub fn synth_rir(spec: &RirSpec, sample_rate: u32) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut h = vec![0.0; spec.length];
    h[0] = 1.0;
    let Some(drr_db) = spec.drr_db else {
        return Ok(h);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let decay = 6.9 / (spec.t60 * sample_rate as f64);
    for (n, v) in h.iter_mut().enumerate().skip(1) {
        let g: f64 = rng.sample(StandardNormal);
        *v = g * (-decay * n as f64).exp();
    }
    let tail_energy: f64 = h[1..].iter().map(|v| v * v).sum();
    if tail_energy > 0.0 {
        let gain = (10f64.powf(-drr_db / 10.0) / tail_energy).sqrt();
        h[1..].iter_mut().for_each(|v| *v *= gain);
    }
    Ok(h)
}

/// Causal convolution of `x` with `h`, truncated to `x.len()` samples.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            let taps = h.len().min(n + 1);
            (0..taps).map(|j| h[j] * x[n - j]).sum()
        })
        .collect()
}
