//! STFT analysis, mel filterbanks and the reconstruction losses built on them.

mod loss;

pub use loss::{
    mel_loss, stft_loss, waveform_loss, LossKind, LossValue, MelLoss, SignalLoss, StftLoss,
    WaveformLoss, LOG_FLOOR,
};

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioBuffer;

/// Per-scale analysis parameters. The window is always a periodic Hann.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let cfg = Self { fft_size, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 16 || !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "fft_size {} must be a power of two >= 16",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "hop {} must be in 1..={}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of full frames that fit in `len` samples (no padding).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop
        }
    }
}

pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Dense frames x bins matrix of nonnegative magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }
}

/// Reusable STFT with a cached FFT plan and window.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: hann(cfg.fft_size),
            fft: planner.plan_fft_forward(cfg.fft_size),
            ifft: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.cfg.fft_size {
            return Err(Error::SignalTooShort {
                needed: self.cfg.fft_size,
                actual: len,
            });
        }
        Ok(())
    }

    /// Complex one-sided spectra, frame-major.
    pub(crate) fn complex(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        self.check_len(x.len())?;
        let n = self.cfg.fft_size;
        let bins = self.cfg.n_bins();
        let frames = self.cfg.n_frames(x.len());
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(x[start + i] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok(out)
    }

    pub fn magnitude(&self, x: &[f64]) -> Result<Spectrogram> {
        let spec = self.complex(x)?;
        let bins = self.cfg.n_bins();
        Ok(Spectrogram {
            frames: spec.len() / bins,
            bins,
            data: spec.iter().map(|c| c.norm()).collect(),
        })
    }

    /// Pulls a gradient w.r.t. one-sided magnitudes back to the signal.
    /// `spec` must be the output of [`Stft::complex`] on the same signal.
    pub(crate) fn magnitude_vjp(
        &self,
        len: usize,
        spec: &[Complex64],
        grad_mag: &[f64],
    ) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let bins = self.cfg.n_bins();
        let frames = spec.len() / bins;
        let mut grad = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        for t in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            let mut any = false;
            for k in 0..bins {
                let x = spec[t * bins + k];
                let mag = x.norm();
                let g = grad_mag[t * bins + k];
                if mag > 0.0 && g != 0.0 {
                    buf[k] = x * (g / mag);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.cfg.hop;
            for i in 0..n {
                grad[start + i] += self.window[i] * buf[i].re;
            }
        }
        grad
    }
}

/// Magnitude spectrogram with a periodic Hann window and no padding.
pub fn stft_mag(x: &AudioBuffer, cfg: StftConfig) -> Result<Spectrogram> {
    Stft::new(cfg)?.magnitude(x.samples())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank stored as sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    f_min: f64,
    f_max: f64,
    /// (first bin, weights) per filter
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "mel filterbank: n_mels {n_mels}, range [{f_min}, {f_max}] Hz, nyquist {nyquist}"
            )));
        }
        let n_bins = fft_size / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut rows = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let weights: Vec<(usize, f64)> = (0..n_bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            let Some(&(first, _)) = weights.first() else {
                return Err(Error::InvalidConfig(format!(
                    "mel filter {m} ({left:.1}-{right:.1} Hz) has no FFT bin; use fewer mels or a larger fft"
                )));
            };
            let last = weights.last().map(|&(k, _)| k).unwrap_or(first);
            let mut dense = vec![0.0; last - first + 1];
            for (k, w) in weights {
                dense[k - first] = w;
            }
            rows.push((first, dense));
        }
        Ok(Self {
            n_mels,
            n_bins,
            f_min,
            f_max,
            rows,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn range(&self) -> (f64, f64) {
        (self.f_min, self.f_max)
    }

    /// Weight of `bin` in filter `mel` (zero outside its support).
    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        let (first, w) = &self.rows[mel];
        if bin < *first {
            0.0
        } else {
            w.get(bin - first).copied().unwrap_or(0.0)
        }
    }

    pub(crate) fn apply_frame(&self, mags: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.rows) {
            *o = w.iter().zip(&mags[*first..]).map(|(a, b)| a * b).sum();
        }
    }

    /// Accumulates `grad_mel` (one frame) into `grad_mag`.
    pub(crate) fn transpose_frame(&self, grad_mel: &[f64], grad_mag: &mut [f64]) {
        for (g, (first, w)) in grad_mel.iter().zip(&self.rows) {
            for (gm, wk) in grad_mag[*first..].iter_mut().zip(w) {
                *gm += g * wk;
            }
        }
    }

    pub fn apply(&self, spec: &Spectrogram) -> Result<Spectrogram> {
        if spec.bins != self.n_bins {
            return Err(Error::shape(format!(
                "filterbank expects {} bins, spectrogram has {}",
                self.n_bins, spec.bins
            )));
        }
        let mut data = vec![0.0; spec.frames * self.n_mels];
        for t in 0..spec.frames {
            self.apply_frame(spec.frame(t), &mut data[t * self.n_mels..(t + 1) * self.n_mels]);
        }
        Ok(Spectrogram {
            frames: spec.frames,
            bins: self.n_mels,
            data,
        })
    }
}

/// One resolution of the multi-scale losses.
#[derive(Debug, Clone)]
pub struct MelScale {
    pub stft: Stft,
    pub bank: MelFilterbank,
}

impl MelScale {
    pub fn new(cfg: StftConfig, n_mels: usize, sample_rate: u32) -> Result<Self> {
        let bank = MelFilterbank::new(n_mels, cfg.fft_size, sample_rate, 0.0, sample_rate as f64 / 2.0)?;
        Ok(Self {
            stft: Stft::new(cfg)?,
            bank,
        })
    }

    /// Log-floored mel spectrogram `log(mel + LOG_FLOOR)`.
    pub fn log_mel(&self, x: &[f64]) -> Result<Spectrogram> {
        let mel = self.bank.apply(&self.stft.magnitude(x)?)?;
        Ok(Spectrogram {
            data: mel.data.iter().map(|m| (m + LOG_FLOOR).ln()).collect(),
            ..mel
        })
    }
}

/// (fft_size, n_mels) of the default multi-scale set; hop is fft_size / 4.
pub const DEFAULT_SCALES: [(usize, usize); 3] = [(2048, 80), (512, 40), (128, 10)];

/// Default three-resolution scale set spanning 0 Hz to Nyquist.
pub fn default_scales(sample_rate: u32) -> Result<Vec<MelScale>> {
    scales_from(&DEFAULT_SCALES, sample_rate)
}

pub fn scales_from(spec: &[(usize, usize)], sample_rate: u32) -> Result<Vec<MelScale>> {
    spec.iter()
        .map(|&(fft, mels)| MelScale::new(StftConfig::new(fft, fft / 4)?, mels, sample_rate))
        .collect()
}
