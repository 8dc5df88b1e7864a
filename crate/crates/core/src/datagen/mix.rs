use serde::{Deserialize, Serialize};

use super::synth::{
    convolve_truncated, synth_noise, synth_rir, synth_source, NoiseColor, RirSpec, SourceSpec,
};
use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

/// Corpus partition a mixture belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One source of a mixture: the signal, its level and optional reverberation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSource {
    pub source: SourceSpec,
    /// Level relative to the synthesized source, dB.
    #[serde(default)]
    pub gain_db: f64,
    #[serde(default)]
    pub rir: Option<RirSpec>,
}

/// Additive noise at a target signal-to-noise ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub color: NoiseColor,
    /// Power of the summed sources over noise power, dB.
    pub snr_db: f64,
}

/// Complete description of one mixture and where it is written.
///
/// The recipe seed must be unique within a manifest; it seeds the noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecipe {
    /// Output directory relative to the corpus root.
    pub path: String,
    pub split: Split,
    pub seed: u64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    pub sources: Vec<MixtureSource>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

impl MixtureRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid(format!(
                "recipe '{}' has no sources",
                self.path
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        for s in &self.sources {
            s.source.validate(self.sample_rate)?;
            if !s.gain_db.is_finite() {
                return Err(Error::invalid(format!(
                    "recipe '{}': gain must be finite",
                    self.path
                )));
            }
            if let Some(rir) = &s.rir {
                rir.validate()?;
            }
        }
        if matches!(&self.noise, Some(n) if !n.snr_db.is_finite()) {
            return Err(Error::invalid(format!(
                "recipe '{}': SNR must be finite",
                self.path
            )));
        }
        Ok(())
    }
}

/// A rendered mixture with its references.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    /// Per-source targets (reverberant when the source has a room response).
    pub references: Vec<Waveform>,
    /// The additive noise actually present in `mixture`.
    pub noise: Option<Waveform>,
    /// Global gain applied to everything to keep the mixture peak at most 1.
    pub normalization: f64,
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Renders `recipe`: sources (reverberated, scaled) plus noise at the
/// requested SNR, then one shared gain if the mixture would clip.
pub fn mix(recipe: &MixtureRecipe) -> Result<Mixture> {
    recipe.validate()?;
    let sr = recipe.sample_rate;
    let mut sources = Vec::with_capacity(recipe.sources.len());
    for s in &recipe.sources {
        let dry = synth_source(&s.source, sr)?.into_samples();
        let wet = match &s.rir {
            Some(rir) => convolve_truncated(&dry, &synth_rir(rir, sr)?),
            None => dry,
        };
        let gain = 10f64.powf(s.gain_db / 20.0);
        sources.push(wet.into_iter().map(|v| v * gain).collect::<Vec<_>>());
    }
    let len = sources.iter().map(Vec::len).min().unwrap_or(0);
    sources.iter_mut().for_each(|s| s.truncate(len));

    let mut mixture: Vec<f64> = (0..len)
        .map(|n| sources.iter().map(|s| s[n]).sum())
        .collect();
    let mut noise = match &recipe.noise {
        Some(spec) => {
            let raw = synth_noise(spec.color, len, sr, recipe.seed)?.into_samples();
            let target = power(&mixture) / 10f64.powf(spec.snr_db / 10.0);
            let gain = (target / power(&raw)).sqrt();
            let scaled: Vec<f64> = raw.into_iter().map(|v| v * gain).collect();
            mixture.iter_mut().zip(&scaled).for_each(|(m, n)| *m += n);
            Some(scaled)
        }
        None => None,
    };

    let peak = mixture.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let normalization = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if normalization != 1.0 {
        let scale = |x: &mut Vec<f64>| x.iter_mut().for_each(|v| *v *= normalization);
        scale(&mut mixture);
        sources.iter_mut().for_each(scale);
        noise.iter_mut().for_each(scale);
    }
    Ok(Mixture {
        mixture: Waveform::new(mixture, sr)?,
        references: sources
            .into_iter()
            .map(|s| Waveform::new(s, sr))
            .collect::<Result<_>>()?,
        noise: noise.map(|n| Waveform::new(n, sr)).transpose()?,
        normalization,
    })
}

/// `10 log10(P(sum of references) / P(noise))` of a rendered mixture.
pub fn measured_snr_db(m: &Mixture) -> Option<f64> {
    let noise = m.noise.as_ref()?;
    let len = m.mixture.len();
    let sum: Vec<f64> = (0..len)
        .map(|n| m.references.iter().map(|r| r.samples()[n]).sum())
        .collect();
    Some(10.0 * (power(&sum) / power(noise.samples())).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(f0: f64, seed: u64, duration: f64) -> MixtureSource {
        MixtureSource {
            source: SourceSpec {
                f0_start: f0,
                f0_end: f0 * 1.1,
                harmonics: 5,
                am_rate: 3.0,
                am_depth: 0.5,
                duration,
                seed,
            },
            gain_db: 0.0,
            rir: None,
        }
    }

    fn recipe() -> MixtureRecipe {
        MixtureRecipe {
            path: "train/0".into(),
            split: Split::Train,
            seed: 1,
            sample_rate: 8000,
            sources: vec![source(120.0, 1, 0.5), source(260.0, 2, 0.5)],
            noise: None,
        }
    }

    #[test]
    fn clean_mixture_is_exact_sum() {
        let mut r = recipe();
        r.sources.iter_mut().for_each(|s| s.gain_db = -6.5);
        let m = mix(&r).unwrap();
        assert_eq!(m.normalization, 1.0);
        let expected: Vec<f64> = (0..m.mixture.len())
            .map(|n| m.references[0].samples()[n] + m.references[1].samples()[n])
            .collect();
        assert_eq!(m.mixture.samples(), expected.as_slice());
    }

    #[test]
    fn noise_reaches_requested_snr() {
        for color in [NoiseColor::White, NoiseColor::Pink] {
            for snr_db in [-5.0, 0.0, 5.0, 12.5] {
                let r = MixtureRecipe {
                    noise: Some(NoiseSpec { color, snr_db }),
                    ..recipe()
                };
                let m = mix(&r).unwrap();
                let got = measured_snr_db(&m).unwrap();
                assert!((got - snr_db).abs() < 0.01, "{color:?} {snr_db}: {got}");
                let noise = m.noise.as_ref().unwrap().samples();
                for n in 0..m.mixture.len() {
                    let sum: f64 = m.references.iter().map(|r| r.samples()[n]).sum();
                    assert!((m.mixture.samples()[n] - sum - noise[n]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn truncates_to_shortest_and_applies_gain() {
        let mut r = recipe();
        r.sources[1] = source(260.0, 2, 0.25);
        r.sources[0].gain_db = -6.0;
        let m = mix(&r).unwrap();
        assert_eq!(m.mixture.len(), 2000);
        assert!(m.references.iter().all(|x| x.len() == 2000));
        let alone = synth_source(&r.sources[0].source, 8000).unwrap();
        let g = 10f64.powf(-6.0 / 20.0);
        let expected = g * alone.samples()[100] * m.normalization;
        assert!((m.references[0].samples()[100] - expected).abs() < 1e-15);
    }

    #[test]
    fn loud_mixture_is_normalized_consistently() {
        let mut r = recipe();
        r.sources.iter_mut().for_each(|s| s.gain_db = 6.0);
        let m = mix(&r).unwrap();
        assert!(m.normalization < 1.0);
        assert!((m.mixture.peak() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_or_invalid_recipes() {
        let r = MixtureRecipe {
            sources: vec![],
            ..recipe()
        };
        assert!(matches!(mix(&r), Err(Error::InvalidArgument(_))));
        let mut r = recipe();
        r.sources[0].gain_db = f64::NAN;
        assert!(matches!(mix(&r), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn reverberant_references() {
        let mut r = recipe();
        r.sources[0].rir = Some(RirSpec {
            t60: 0.3,
            drr_db: Some(3.0),
            length: 1200,
            seed: 5,
        });
        let m = mix(&r).unwrap();
        let dry = synth_source(&r.sources[0].source, 8000).unwrap();
        assert_ne!(m.references[0].samples(), dry.samples());
        assert_eq!(m, mix(&r).unwrap());
    }
}
