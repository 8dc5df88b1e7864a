use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the weighted magnitude spectrogram enters the time-domain features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `w = wc + f1(X) * wc + f2(X)`.
    Film,
    /// `w = reduce([wc, proj(X)])`.
    ConcatLinear,
    /// `w = wc + proj(X)`.
    Add,
    /// No spectral branch at all.
    None,
}

impl Conditioning {
    pub const ALL: [Conditioning; 4] = [
        Conditioning::Film,
        Conditioning::ConcatLinear,
        Conditioning::Add,
        Conditioning::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Conditioning::Film => "film",
            Conditioning::ConcatLinear => "concat_linear",
            Conditioning::Add => "add",
            Conditioning::None => "none",
        }
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Conditioning::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown conditioning variant '{s}'")))
    }
}

/// Optional nonlinearity on the FiLM scale and shift maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmActivation {
    #[default]
    Identity,
    Tanh,
}

/// Architecture hyperparameters.
///
/// Loaded from TOML; every key is optional and defaults to the full-size
/// model. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConSepConfig {
    pub sample_rate: u32,
    /// Number of learnable encoder bases (feature width N).
    pub n_basis: usize,
    pub enc_kernel: usize,
    pub enc_stride: usize,
    pub stft_win: usize,
    pub stft_hop: usize,
    pub stft_pad: usize,
    pub mulca_kernels: [usize; 3],
    /// Bottleneck width of the MulCA fully connected network; `round(F/4)`
    /// when absent.
    pub mulca_hidden: Option<usize>,
    pub mulca_enabled: bool,
    /// Number of sources K.
    pub num_sources: usize,
    /// Dual-path repeats D.
    pub repeats: usize,
    /// Transformer units per intra or inter stack E.
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Segment length in frames (50% overlap).
    pub chunk: usize,
    pub conditioning: Conditioning,
    pub film_activation: FilmActivation,
}

impl Default for ConSepConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            n_basis: 256,
            enc_kernel: 16,
            enc_stride: 8,
            stft_win: 256,
            stft_hop: 8,
            stft_pad: 120,
            mulca_kernels: [3, 5, 10],
            mulca_hidden: None,
            mulca_enabled: true,
            num_sources: 2,
            repeats: 2,
            layers: 4,
            heads: 8,
            d_ff: 1024,
            chunk: 250,
            conditioning: Conditioning::Film,
            film_activation: FilmActivation::Identity,
        }
    }
}

impl ConSepConfig {
    /// Smallest configuration exercising every stage; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_basis: 8,
            stft_win: 32,
            stft_pad: 8,
            heads: 2,
            d_ff: 16,
            chunk: 4,
            repeats: 1,
            layers: 1,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        if self.n_basis == 0 || self.heads == 0 || self.n_basis % self.heads != 0 {
            return fail(format!(
                "n_basis ({}) must be a positive multiple of heads ({})",
                self.n_basis, self.heads
            ));
        }
        if self.chunk < 2 || self.chunk % 2 != 0 {
            return fail(format!("chunk must be even and >= 2, got {}", self.chunk));
        }
        if self.enc_kernel == 0 || self.enc_stride == 0 {
            return fail("encoder kernel and stride must be positive".into());
        }
        if self.enc_stride != self.stft_hop {
            return fail(format!(
                "enc_stride ({}) must equal stft_hop ({})",
                self.enc_stride, self.stft_hop
            ));
        }
        if self.stft_win < 2 || self.stft_win % 2 != 0 {
            return fail(format!(
                "stft_win must be even and >= 2, got {}",
                self.stft_win
            ));
        }
        if self.stft_win != self.enc_kernel + 2 * self.stft_pad {
            return fail(format!(
                "stft_win ({}) must equal enc_kernel + 2 * stft_pad ({}) so both paths share frames",
                self.stft_win,
                self.enc_kernel + 2 * self.stft_pad
            ));
        }
        if self.num_sources == 0 || self.num_sources > crate::objectives::MAX_SOURCES {
            return fail(format!(
                "num_sources must be in 1..={}",
                crate::objectives::MAX_SOURCES
            ));
        }
        if self.mulca_kernels.contains(&0) || self.mulca_hidden == Some(0) || self.d_ff == 0 {
            return fail("mulca kernels, mulca_hidden and d_ff must be positive".into());
        }
        Ok(())
    }

    /// One-sided STFT bin count F.
    pub fn freq_bins(&self) -> usize {
        self.stft_win / 2 + 1
    }

    pub fn mulca_hidden(&self) -> usize {
        self.mulca_hidden
            .unwrap_or_else(|| ((self.freq_bins() as f64 / 4.0).round() as usize).max(1))
    }

    /// Whether the STFT branch is evaluated at all.
    pub fn uses_spectrogram(&self) -> bool {
        self.conditioning != Conditioning::None
    }

    pub fn uses_mulca(&self) -> bool {
        self.uses_spectrogram() && self.mulca_enabled
    }

    /// Encoder frame count for `len` input samples.
    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.enc_kernel).then(|| (len - self.enc_kernel) / self.enc_stride + 1)
    }

    /// Longest prefix of `len` samples that the encoder/decoder framing covers.
    pub fn trimmed_len(&self, len: usize) -> Option<usize> {
        self.frames(len)
            .map(|l| (l - 1) * self.enc_stride + self.enc_kernel)
    }
}
