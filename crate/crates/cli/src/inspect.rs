//! Plot-data exports: encoder basis ordering and responses, spectrograms.

use std::path::Path;

use consep::dsp::{hamming_window, magnitude, stft, Waveform};
use consep::{Error, Result};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Zero-padded transform length of the basis frequency responses.
pub const RESPONSE_FFT: usize = 512;
/// Lower clip of exported log-magnitudes, dB.
pub const DB_FLOOR: f64 = -80.0;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Greedy nearest-neighbour chain under Euclidean distance, starting from
/// the filter with the largest norm. Ties go to the lower index.
pub fn greedy_order(filters: &[Vec<f64>]) -> Vec<usize> {
    if filters.is_empty() {
        return Vec::new();
    }
    let zero = vec![0.0; filters[0].len()];
    let mut current = (0..filters.len()).fold(0, |best, i| {
        if distance(&filters[i], &zero) > distance(&filters[best], &zero) {
            i
        } else {
            best
        }
    });
    let mut visited = vec![false; filters.len()];
    let mut order = Vec::with_capacity(filters.len());
    loop {
        visited[current] = true;
        order.push(current);
        let next = (0..filters.len()).filter(|&j| !visited[j]).fold(
            None,
            |best: Option<(usize, f64)>, j| {
                let d = distance(&filters[current], &filters[j]);
                match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((j, d)),
                }
            },
        );
        match next {
            Some((j, _)) => current = j,
            None => return order,
        }
    }
}

/// Magnitude response of `filter` zero-padded to [`RESPONSE_FFT`] points,
/// one-sided (`RESPONSE_FFT / 2 + 1` bins).
pub fn frequency_response(filter: &[f64]) -> Result<Vec<f64>> {
    if filter.len() > RESPONSE_FFT {
        return Err(Error::InvalidArgument(format!(
            "filter of {} taps exceeds the {RESPONSE_FFT}-point transform",
            filter.len()
        )));
    }
    let mut buf: Vec<Complex64> = (0..RESPONSE_FFT)
        .map(|i| Complex64::new(filter.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    FftPlanner::new()
        .plan_fft_forward(RESPONSE_FFT)
        .process(&mut buf);
    Ok(buf[..RESPONSE_FFT / 2 + 1]
        .iter()
        .map(|c| c.norm())
        .collect())
}

/// Log-magnitude spectrogram `[F][L]` in dB, clipped below at [`DB_FLOOR`].
pub fn log_spectrogram(x: &Waveform, win: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    let mag = magnitude(&stft(x, &hamming_window(win)?, hop, 0)?);
    Ok((0..mag.freq_bins())
        .map(|f| {
            (0..mag.frames())
                .map(|l| (20.0 * mag.get(f, l).log10()).max(DB_FLOOR))
                .collect()
        })
        .collect())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes a numeric matrix as CSV, one row per line.
pub fn write_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e.into(),
            })?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes a matrix as an 8-bit binary greyscale PGM, mapping `[lo, hi]`
/// linearly onto `[0, 255]` (a flat matrix maps to 0).
pub fn write_pgm(path: &Path, rows: &[Vec<f64>], lo: f64, hi: f64) -> Result<()> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("cannot write an empty image".into()));
    }
    let span = hi - lo;
    let pixels: Vec<u8> = rows
        .iter()
        .flat_map(|r| r.iter())
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
}

/// Smallest and largest entry of a matrix.
pub fn value_range(rows: &[Vec<f64>]) -> (f64, f64) {
    rows.iter()
        .flat_map(|r| r.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}
