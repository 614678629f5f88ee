use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Blackman,
}

impl Window {
    /// Window value at `u` in [-1, 1] (centered, zero at |u| = 1).
    fn at(self, u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        match self {
            Window::Hann => 0.5 + 0.5 * (PI * u).cos(),
            Window::Blackman => 0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos(),
        }
    }
}

/// Windowed-sinc interpolation kernel.
///
/// Time is measured in samples of the low-rate side, so the same kernel
/// serves both upsampling (interpolation) and downsampling (anti-alias
/// filtering before decimation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SincKernel {
    pub zero_crossings: usize,
    pub window: Window,
    pub cutoff_ratio: f64,
}

impl Default for SincKernel {
    fn default() -> Self {
        Self {
            zero_crossings: 64,
            window: Window::Hann,
            cutoff_ratio: 1.0,
        }
    }
}

impl SincKernel {
    pub fn validate(&self) -> Result<()> {
        if self.zero_crossings == 0 {
            return Err(Error::InvalidConfig("zero_crossings must be >= 1".into()));
        }
        if !(self.cutoff_ratio > 0.0 && self.cutoff_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "cutoff_ratio {} outside (0, 1]",
                self.cutoff_ratio
            )));
        }
        Ok(())
    }

    /// Continuous kernel value at `t` low-rate samples from the center.
    pub fn eval(&self, t: f64) -> f64 {
        let z = self.zero_crossings as f64;
        if t.abs() >= z {
            return 0.0;
        }
        let c = self.cutoff_ratio;
        c * sinc(c * t) * self.window.at(t / z)
    }

    /// Polyphase taps for an integer `factor`: `taps[p][j + Z]` weights the
    /// low-rate sample `n + j` when producing high-rate sample `n * factor + p`.
    /// Each phase is normalized to unit sum, so all taps sum to `factor`.
    pub fn phase_taps(&self, factor: usize) -> Vec<Vec<f64>> {
        let z = self.zero_crossings as isize;
        (0..factor)
            .map(|p| {
                let frac = p as f64 / factor as f64;
                let mut taps: Vec<f64> = (-z..=z).map(|j| self.eval(frac - j as f64)).collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                taps
            })
            .collect()
    }
}

fn sinc(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else if u.fract() == 0.0 {
        // exact zeros at nonzero integers keep phase 0 an exact identity
        0.0
    } else {
        (PI * u).sin() / (PI * u)
    }
}

/// Integer-factor polyphase resampler with precomputed taps.
///
/// `up` is the interpolation operator U; `down` is its mirror `U^T / factor`,
/// which low-pass filters at the low-rate Nyquist and decimates.
#[derive(Debug, Clone)]
pub struct Resampler {
    factor: usize,
    half: isize,
    taps: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(factor: usize, kernel: &SincKernel) -> Result<Self> {
        if factor < 2 {
            return Err(Error::InvalidFactor(factor));
        }
        kernel.validate()?;
        Ok(Self {
            factor,
            half: kernel.zero_crossings as isize,
            taps: kernel.phase_taps(factor),
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Upsamples `x` by the factor; output length is `x.len() * factor`.
    /// Samples beyond either end are treated as zero.
    pub fn up(&self, x: &[f64]) -> Vec<f64> {
        let n_in = x.len() as isize;
        let mut y = vec![0.0; x.len() * self.factor];
        for n in 0..n_in {
            let j_lo = (-self.half).max(-n);
            let j_hi = self.half.min(n_in - 1 - n);
            for (p, taps) in self.taps.iter().enumerate() {
                let mut acc = 0.0;
                for j in j_lo..=j_hi {
                    acc += x[(n + j) as usize] * taps[(j + self.half) as usize];
                }
                y[n as usize * self.factor + p] = acc;
            }
        }
        y
    }

    /// Adjoint of [`Resampler::up`]: maps a high-rate signal of length
    /// `n * factor` to `n` low-rate samples.
    pub fn up_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let n_out = (y.len() / self.factor) as isize;
        let mut x = vec![0.0; n_out as usize];
        for (m, out) in x.iter_mut().enumerate() {
            let m = m as isize;
            let mut acc = 0.0;
            // contributions from high-rate frames n = m - j
            let j_lo = (-self.half).max(m - (n_out - 1));
            let j_hi = self.half.min(m);
            for j in j_lo..=j_hi {
                let base = ((m - j) as usize) * self.factor;
                let tap_idx = (j + self.half) as usize;
                for (p, taps) in self.taps.iter().enumerate() {
                    acc += y[base + p] * taps[tap_idx];
                }
            }
            *out = acc;
        }
        x
    }

    /// Anti-aliased decimation. Trailing samples that do not fill a whole
    /// output period are dropped.
    pub fn down(&self, x: &[f64]) -> Vec<f64> {
        let usable = x.len() - x.len() % self.factor;
        let scale = 1.0 / self.factor as f64;
        let mut y = self.up_adjoint(&x[..usable]);
        y.iter_mut().for_each(|v| *v *= scale);
        y
    }
}

fn check_resample_input(x: &AudioBuffer, factor: usize) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    if factor < 2 {
        return Err(Error::InvalidFactor(factor));
    }
    Ok(())
}

/// Upsamples by an integer factor (the operator U).
pub fn resample_up(x: &AudioBuffer, factor: usize, kernel: &SincKernel) -> Result<AudioBuffer> {
    check_resample_input(x, factor)?;
    let r = Resampler::new(factor, kernel)?;
    AudioBuffer::new(r.up(x.samples()), x.sample_rate() * factor as u32)
}

/// Downsamples by an integer factor (the operator D).
pub fn resample_down(x: &AudioBuffer, factor: usize, kernel: &SincKernel) -> Result<AudioBuffer> {
    check_resample_input(x, factor)?;
    if x.sample_rate() % factor as u32 != 0 {
        return Err(Error::InvalidConfig(format!(
            "sample rate {} not divisible by {factor}",
            x.sample_rate()
        )));
    }
    if x.len() < factor {
        return Err(Error::SignalTooShort {
            needed: factor,
            actual: x.len(),
        });
    }
    let r = Resampler::new(factor, kernel)?;
    AudioBuffer::new(r.down(x.samples()), x.sample_rate() / factor as u32)
}

/// Arbitrary-ratio conversion by direct kernel evaluation. Only used when
/// ingesting WAV files recorded at a non-codec rate.
pub fn resample_to(x: &AudioBuffer, target_rate: u32, kernel: &SincKernel) -> Result<AudioBuffer> {
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    kernel.validate()?;
    if target_rate == x.sample_rate() {
        return Ok(x.clone());
    }
    let ratio = x.sample_rate() as f64 / target_rate as f64;
    // kernel is stretched when decimating so its cutoff lands on the output Nyquist
    let stretch = ratio.max(1.0);
    let reach = kernel.zero_crossings as f64 * stretch;
    let out_len = ((x.len() as f64) / ratio).floor() as usize;
    let src = x.samples();
    let out = (0..out_len)
        .map(|m| {
            let t = m as f64 * ratio;
            let lo = ((t - reach).ceil().max(0.0)) as usize;
            let hi = ((t + reach).floor() as usize).min(src.len() - 1);
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (n, s) in src.iter().enumerate().take(hi + 1).skip(lo) {
                let w = kernel.eval((t - n as f64) / stretch);
                acc += s * w;
                norm += w;
            }
            if norm.abs() > 1e-12 {
                acc / norm
            } else {
                0.0
            }
        })
        .collect();
    AudioBuffer::new(out, target_rate)
}
