//! WAV file I/O (RIFF PCM 16-bit mono) and linear-interpolation resampling.

use std::path::Path;

use crate::{Error, Result};

use super::Waveform;

/// All waveforms are normalized to this rate on load.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Loads a RIFF/WAVE file (PCM 16-bit, mono), scales samples to [-1, 1] by
/// dividing by 32768, and resamples to 16 kHz by linear interpolation when
/// the file uses a different rate.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        // hound wraps short reads in io::ErrorKind::Other; only surface
        // genuine filesystem failures as I/O, the rest is malformed input.
        hound::Error::IoError(io)
            if matches!(
                io.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ) =>
        {
            Error::Io(io)
        }
        other => Error::Parse(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: expected PCM 16-bit, got {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let mut samples = Vec::with_capacity(reader.len() as usize);
    for s in reader.samples::<i16>() {
        let s = s.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        samples.push(f64::from(s) / 32768.0);
    }
    if samples.is_empty() {
        return Err(Error::Parse(format!("{}: no samples", path.display())));
    }
    let samples = if spec.sample_rate == TARGET_SAMPLE_RATE {
        samples
    } else {
        resample_linear(&samples, spec.sample_rate, TARGET_SAMPLE_RATE)
    };
    Waveform::new(samples, TARGET_SAMPLE_RATE, path.display().to_string())
}

/// Writes a waveform as RIFF PCM 16-bit mono at its own sample rate.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let map_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Parse(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_err)?;
    for &x in &w.samples {
        let q = (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(map_err)?;
    }
    writer.finalize().map_err(map_err)?;
    Ok(())
}

/// Resamples by linear interpolation. Output length is
/// `round(n * sr_out / sr_in)`; output sample `i` reads input position
/// `i * sr_in / sr_out`, clamped to the final input sample.
pub fn resample_linear(samples: &[f64], sr_in: u32, sr_out: u32) -> Vec<f64> {
    interp_at_ratio(samples, f64::from(sr_in) / f64::from(sr_out))
}

/// Shared core of resampling and speed perturbation: output sample `i` is
/// the linear interpolation of the input at position `i * ratio`, with
/// output length `round(n / ratio)`.
pub(super) fn interp_at_ratio(samples: &[f64], ratio: f64) -> Vec<f64> {
    let n = samples.len();
    let n_out = ((n as f64) / ratio).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let pos = i as f64 * ratio;
        let lo = pos.floor() as usize;
        if lo >= n - 1 {
            out.push(samples[n - 1]);
            continue;
        }
        let frac = pos - lo as f64;
        out.push(samples[lo] * (1.0 - frac) + samples[lo + 1] * frac);
    }
    out
}
