//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use consep::dsp::{hamming_window, stft, Waveform};

/// Reverberation time from Schroeder backward integration: a least-squares
/// line through the energy decay curve between -5 and -25 dB, extrapolated
/// to -60 dB. The direct path (sample 0) is excluded.
pub fn schroeder_t60(h: &[f64], sample_rate: u32) -> f64 {
    let tail = &h[1..];
    let mut edc = vec![0.0; tail.len()];
    let mut acc = 0.0;
    for i in (0..tail.len()).rev() {
        acc += tail[i] * tail[i];
        edc[i] = acc;
    }
    let total = edc[0];
    let points: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .map(|(i, &e)| (i as f64 / sample_rate as f64, 10.0 * (e / total).log10()))
        .filter(|&(_, db)| (-25.0..=-5.0).contains(&db))
        .collect();
    let slope = fit_slope(&points);
    -60.0 / slope
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Spectral slope in dB per octave between `lo` and `hi` Hz, from a
/// Welch-averaged periodogram (Hamming 1024, hop 512).
pub fn spectral_slope_db_per_octave(x: &Waveform, lo: f64, hi: f64) -> f64 {
    let win = 1024;
    let s = stft(x, &hamming_window(win).unwrap(), win / 2, 0).unwrap();
    let sr = x.sample_rate() as f64;
    let points: Vec<(f64, f64)> = (1..s.freq_bins())
        .map(|f| (f, f as f64 * sr / win as f64))
        .filter(|&(_, hz)| hz >= lo && hz <= hi)
        .map(|(f, hz)| {
            let p =
                (0..s.frames()).map(|l| s.get(f, l).norm_sqr()).sum::<f64>() / s.frames() as f64;
            (hz.log2(), 10.0 * p.log10())
        })
        .collect();
    fit_slope(&points)
}

use consep::datagen::{mix, Dataset, DatasetItem, MixtureRecipe, MixtureSource, SourceSpec, Split};

/// `count` two-source mixtures of `duration` seconds: a low voice
/// (100-150 Hz) against a high one (250-350 Hz), each with its own glide.
pub fn pitch_separated_dataset(count: usize, duration: f64, seed: u64) -> Dataset {
    let items = (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1000) + i as u64;
            let low = 100.0 + 50.0 * ((i * 7) % 10) as f64 / 10.0;
            let high = 250.0 + 100.0 * ((i * 3) % 10) as f64 / 10.0;
            let voice = |f0: f64, glide: f64, harmonics: usize, seed: u64| MixtureSource {
                source: SourceSpec {
                    f0_start: f0,
                    f0_end: f0 * glide,
                    harmonics,
                    am_rate: 3.0,
                    am_depth: 0.5,
                    duration,
                    seed,
                },
                gain_db: 0.0,
                rir: None,
            };
            let recipe = MixtureRecipe {
                path: format!("item{i}"),
                split: Split::Train,
                seed: s,
                sample_rate: 8000,
                sources: vec![voice(low, 1.1, 8, 2 * s), voice(high, 0.92, 5, 2 * s + 1)],
                noise: None,
            };
            let m = mix(&recipe).unwrap();
            DatasetItem::new(recipe.path, m.mixture, m.references).unwrap()
        })
        .collect();
    Dataset::from_items(items)
}
