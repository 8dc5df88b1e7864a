use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{Waveform, Window};
use crate::error::{Error, Result};

/// One-sided complex STFT, stored frequency-major (`F` rows of `L` frames).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    bins: Vec<Complex64>,
    freq_bins: usize,
    frames: usize,
    window_len: usize,
    hop: usize,
    pad: usize,
}

impl ComplexSpectrogram {
    pub fn from_bins(
        bins: Vec<Complex64>,
        frames: usize,
        window_len: usize,
        hop: usize,
        pad: usize,
    ) -> Result<Self> {
        if window_len < 2 || window_len % 2 != 0 {
            return Err(Error::invalid("window length must be even and >= 2"));
        }
        let freq_bins = window_len / 2 + 1;
        if frames == 0 || bins.len() != freq_bins * frames {
            return Err(Error::invalid(format!(
                "expected {freq_bins}x{frames} bins, got {}",
                bins.len()
            )));
        }
        if hop == 0 {
            return Err(Error::invalid("hop must be >= 1"));
        }
        Ok(Self {
            bins,
            freq_bins,
            frames,
            window_len,
            hop,
            pad,
        })
    }

    pub fn freq_bins(&self) -> usize {
        self.freq_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn get(&self, f: usize, l: usize) -> Complex64 {
        self.bins[f * self.frames + l]
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex64] {
        &mut self.bins
    }
}

/// Nonnegative magnitude spectrogram, frequency-major like [`ComplexSpectrogram`].
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    values: Vec<f64>,
    freq_bins: usize,
    frames: usize,
}

impl MagnitudeSpectrogram {
    pub fn new(values: Vec<f64>, freq_bins: usize, frames: usize) -> Result<Self> {
        if values.len() != freq_bins * frames || frames == 0 || freq_bins == 0 {
            return Err(Error::invalid(format!(
                "expected {freq_bins}x{frames} magnitudes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("magnitudes must be finite and nonnegative"));
        }
        Ok(Self {
            values,
            freq_bins,
            frames,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn freq_bins(&self) -> usize {
        self.freq_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, f: usize, l: usize) -> f64 {
        self.values[f * self.frames + l]
    }

    /// Frame-major copy (`L` rows of `F` bins).
    pub fn transposed(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for f in 0..self.freq_bins {
            for l in 0..self.frames {
                out[l * self.freq_bins + f] = self.values[f * self.frames + l];
            }
        }
        out
    }
}

/// Number of frames produced by [`stft`] for a signal of `len` samples.
pub fn stft_frame_count(len: usize, window_len: usize, hop: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if hop == 0 || padded < window_len {
        None
    } else {
        Some((padded - window_len) / hop + 1)
    }
}

/// Short-time Fourier transform with `pad` zeros on both sides of the signal.
pub fn stft(x: &Waveform, window: &Window, hop: usize, pad: usize) -> Result<ComplexSpectrogram> {
    let win = window.coefficients();
    let w_len = win.len();
    if w_len < 2 || w_len % 2 != 0 {
        return Err(Error::invalid(format!(
            "stft window length must be even and >= 2, got {w_len}"
        )));
    }
    if hop == 0 {
        return Err(Error::invalid("stft hop must be >= 1"));
    }
    let frames = stft_frame_count(x.len(), w_len, hop, pad).ok_or_else(|| {
        Error::invalid(format!(
            "padded signal ({} samples) shorter than window ({w_len})",
            x.len() + 2 * pad
        ))
    })?;
    let mut padded = vec![0.0; x.len() + 2 * pad];
    padded[pad..pad + x.len()].copy_from_slice(x.samples());

    let freq_bins = w_len / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(w_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); w_len];
    let mut bins = vec![Complex64::new(0.0, 0.0); freq_bins * frames];
    for l in 0..frames {
        let start = l * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(padded[start + n] * win[n], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..freq_bins {
            bins[f * frames + l] = buf[f];
        }
    }
    ComplexSpectrogram::from_bins(bins, frames, w_len, hop, pad)
}

pub fn magnitude(s: &ComplexSpectrogram) -> MagnitudeSpectrogram {
    MagnitudeSpectrogram {
        values: s.bins.iter().map(|c| c.norm()).collect(),
        freq_bins: s.freq_bins,
        frames: s.frames,
    }
}

/// Weighted overlap-add inverse of [`stft`], normalized by the summed squared
/// window. The returned signal covers the unpadded region.
pub fn istft(s: &ComplexSpectrogram, window: &Window) -> Result<Waveform> {
    let win = window.coefficients();
    let w_len = s.window_len;
    if win.len() != w_len {
        return Err(Error::invalid(format!(
            "window length {} does not match spectrogram window {w_len}",
            win.len()
        )));
    }
    let padded_len = (s.frames - 1) * s.hop + w_len;
    if padded_len <= 2 * s.pad {
        return Err(Error::invalid("padding leaves no samples to reconstruct"));
    }
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(w_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); w_len];
    let mut acc = vec![0.0; padded_len];
    let mut norm = vec![0.0; padded_len];
    let scale = 1.0 / w_len as f64;
    for l in 0..s.frames {
        for f in 0..s.freq_bins {
            buf[f] = s.get(f, l);
        }
        for f in s.freq_bins..w_len {
            buf[f] = s.get(w_len - f, l).conj();
        }
        ifft.process(&mut buf);
        let start = l * s.hop;
        for n in 0..w_len {
            acc[start + n] += buf[n].re * scale * win[n];
            norm[start + n] += win[n] * win[n];
        }
    }
    let region = s.pad..padded_len - s.pad;
    let mut out = Vec::with_capacity(region.len());
    for i in region {
        if norm[i] < 1e-12 {
            return Err(Error::invalid(format!(
                "window overlap energy vanishes at sample {}",
                i - s.pad
            )));
        }
        out.push(acc[i] / norm[i]);
    }
    Waveform::new(out, super::DEFAULT_SAMPLE_RATE)
}
