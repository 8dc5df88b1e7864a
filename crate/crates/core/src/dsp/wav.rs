use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// Sample encodings accepted by [`wav_read`] and produced by [`wav_write_as`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn map_err(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::format(format!("{}: {other}", path.display())),
    }
}

/// Reads a mono PCM-16 or float-32 WAV file. PCM samples are scaled by 1/32768.
pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| map_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_err(path, e))?,
        (format, bits) => {
            return Err(Error::format(format!(
                "{}: unsupported sample encoding {format:?} {bits}-bit",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Writes a mono float-32 WAV file.
pub fn wav_write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    wav_write_as(path, w, WavEncoding::Float32)
}

pub fn wav_write_as(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let (bits_per_sample, sample_format) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample,
        sample_format,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_err(path, e))?;
    for &s in w.samples() {
        let res = match encoding {
            WavEncoding::Pcm16 => {
                writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            }
            WavEncoding::Float32 => writer.write_sample(s as f32),
        };
        res.map_err(|e| map_err(path, e))?;
    }
    writer.finalize().map_err(|e| map_err(path, e))
}
