use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

fn unsupported(path: &Path, field: &'static str, found: impl ToString, expected: &'static str) -> Error {
    Error::UnsupportedFormat { path: path.to_path_buf(), field, found: found.to_string(), expected }
}

/// Read a 16-bit PCM mono WAV file. Samples are scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int {
        return Err(unsupported(path, "sample_format", "float", "int"));
    }
    if spec.bits_per_sample != 16 {
        return Err(unsupported(path, "bits_per_sample", spec.bits_per_sample, "16"));
    }
    if spec.channels != 1 {
        return Err(unsupported(path, "channels", spec.channels, "1"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate, path.display().to_string())
}

/// Write 16-bit PCM mono; samples are rounded and clamped to the i16 range.
pub fn write_wav(path: &Path, wav: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    };
    let mut w = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &wav.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
