use std::path::Path;

use super::{resample_down, resample_to, resample_up, AudioBuffer, SincKernel};
use crate::error::{Error, Result};

/// Sample encoding used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        // the file is already open, so read failures mean a short or corrupt body
        hound::Error::IoError(io) => Error::MalformedWav(format!("{}: {io}", path.display())),
        hound::Error::FormatError(msg) => Error::MalformedWav(format!("{}: {msg}", path.display())),
        hound::Error::UnfinishedSample => {
            Error::MalformedWav(format!("{}: unfinished sample", path.display()))
        }
        other => Error::UnsupportedWav(format!("{}: {other}", path.display())),
    }
}

/// Reads a PCM16 or float32 WAV file. Multi-channel input is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader =
        hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::UnsupportedWav(format!(
                "{}: {bits}-bit {fmt:?} samples (need PCM16 or float32)",
                path.display()
            )))
        }
    }
    .map_err(|e| map_hound(path, e))?;

    let channels = spec.channels.max(1) as usize;
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    AudioBuffer::new(mono, spec.sample_rate)
}

/// Writes a mono WAV file. PCM16 output is clipped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, x: &AudioBuffer, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: x.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in x.samples() {
        let res = match format {
            WavFormat::Pcm16 => {
                writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            }
            WavFormat::Float32 => writer.write_sample(s as f32),
        };
        res.map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// Reads a WAV file for codec use at `target_rate`. Files at any other rate
/// are rejected unless `auto_resample` is set.
pub fn load_for_codec(
    path: impl AsRef<Path>,
    target_rate: u32,
    auto_resample: bool,
    kernel: &SincKernel,
) -> Result<AudioBuffer> {
    let x = read_wav(path)?;
    let rate = x.sample_rate();
    if rate == target_rate {
        return Ok(x);
    }
    if !auto_resample {
        return Err(Error::RateMismatch {
            expected: target_rate,
            actual: rate,
        });
    }
    if target_rate > rate && target_rate % rate == 0 {
        resample_up(&x, (target_rate / rate) as usize, kernel)
    } else if rate > target_rate && rate % target_rate == 0 {
        resample_down(&x, (rate / target_rate) as usize, kernel)
    } else {
        resample_to(&x, target_rate, kernel)
    }
}
