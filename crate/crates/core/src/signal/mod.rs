//! Time-domain signal containers, WAV I/O and the sinc resampling operators
//! that connect the 16 kHz and 32 kHz branches.

mod resample;
mod wav;

pub use resample::{resample_down, resample_to, resample_up, Resampler, SincKernel, Window};
pub use wav::{load_for_codec, read_wav, write_wav, WavFormat};

use crate::error::{Error, Result};

/// Native rates of the two codec branches.
pub const CODEC_RATES: [u32; 2] = [16_000, 32_000];

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, rejecting NaN/Inf samples and a zero rate.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample(format!(
                "sample {i} is {}",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Copy of `len` samples starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            return Err(Error::shape(format!(
                "slice {start}..{} out of bounds for length {}",
                start + len,
                self.samples.len()
            )));
        }
        Ok(Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    /// Sample-wise `self + other`.
    pub fn add(&self, other: &AudioBuffer) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Sample-wise `self - other`.
    pub fn sub(&self, other: &AudioBuffer) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn check_compatible(&self, other: &AudioBuffer) -> Result<()> {
        if self.sample_rate != other.sample_rate || self.len() != other.len() {
            return Err(Error::shape(format!(
                "{} samples @ {} Hz vs {} samples @ {} Hz",
                self.len(),
                self.sample_rate,
                other.len(),
                other.sample_rate
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &AudioBuffer, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            sample_rate: self.sample_rate,
        })
    }
}
