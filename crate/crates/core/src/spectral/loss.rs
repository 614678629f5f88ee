use std::fmt;

use serde::{Deserialize, Serialize};

use super::MelScale;
use crate::error::{Error, Result};
use crate::signal::AudioBuffer;

/// Floor added before taking logs of mel / magnitude spectra.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mel,
    Stft,
    Waveform,
    Gen,
    Fm,
    Cb,
    Cmt,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mel => "mel",
            LossKind::Stft => "stft",
            LossKind::Waveform => "waveform",
            LossKind::Gen => "gen",
            LossKind::Fm => "fm",
            LossKind::Cb => "cb",
            LossKind::Cmt => "cmt",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
}

/// A reconstruction loss between a fixed reference and an estimate, with
/// its gradient w.r.t. the estimate.
pub trait SignalLoss: Send + Sync {
    fn kind(&self) -> LossKind;

    fn value_and_grad(&self, reference: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, reference: &[f64], estimate: &[f64]) -> Result<f64> {
        self.value_and_grad(reference, estimate).map(|(v, _)| v)
    }
}

fn check_len(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over scales of the L1 distance between log-mel spectrograms.
#[derive(Debug, Clone)]
pub struct MelLoss {
    pub scales: Vec<MelScale>,
}

impl SignalLoss for MelLoss {
    fn kind(&self) -> LossKind {
        LossKind::Mel
    }

    fn value_and_grad(&self, reference: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(reference, estimate)?;
        if self.scales.is_empty() {
            return Err(Error::InvalidConfig("mel loss needs at least one scale".into()));
        }
        let n_scales = self.scales.len() as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; estimate.len()];
        for scale in &self.scales {
            let bins = scale.stft.config().n_bins();
            let n_mels = scale.bank.n_mels();
            let spec_r = scale.stft.complex(reference)?;
            let spec_e = scale.stft.complex(estimate)?;
            let frames = spec_e.len() / bins;
            let norm = 1.0 / (frames * n_mels) as f64 / n_scales;

            let mut mag_r = vec![0.0; bins];
            let mut mag_e = vec![0.0; bins];
            let mut mel_r = vec![0.0; n_mels];
            let mut mel_e = vec![0.0; n_mels];
            let mut g_mel = vec![0.0; n_mels];
            let mut g_mag = vec![0.0; spec_e.len()];
            for t in 0..frames {
                for k in 0..bins {
                    mag_r[k] = spec_r[t * bins + k].norm();
                    mag_e[k] = spec_e[t * bins + k].norm();
                }
                scale.bank.apply_frame(&mag_r, &mut mel_r);
                scale.bank.apply_frame(&mag_e, &mut mel_e);
                for m in 0..n_mels {
                    let d = (mel_e[m] + LOG_FLOOR).ln() - (mel_r[m] + LOG_FLOOR).ln();
                    total += d.abs() * norm;
                    g_mel[m] = sign(d) * norm / (mel_e[m] + LOG_FLOOR);
                }
                scale
                    .bank
                    .transpose_frame(&g_mel, &mut g_mag[t * bins..(t + 1) * bins]);
            }
            let g = scale.stft.magnitude_vjp(estimate.len(), &spec_e, &g_mag);
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok((total, grad))
    }
}

/// Mean over scales of (L1 on log-magnitude + L1 on magnitude).
#[derive(Debug, Clone)]
pub struct StftLoss {
    pub scales: Vec<MelScale>,
}

impl SignalLoss for StftLoss {
    fn kind(&self) -> LossKind {
        LossKind::Stft
    }

    fn value_and_grad(&self, reference: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(reference, estimate)?;
        if self.scales.is_empty() {
            return Err(Error::InvalidConfig("stft loss needs at least one scale".into()));
        }
        let n_scales = self.scales.len() as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; estimate.len()];
        for scale in &self.scales {
            let spec_r = scale.stft.complex(reference)?;
            let spec_e = scale.stft.complex(estimate)?;
            let norm = 1.0 / spec_e.len() as f64 / n_scales;
            let g_mag: Vec<f64> = spec_r
                .iter()
                .zip(&spec_e)
                .map(|(r, e)| {
                    let (r, e) = (r.norm(), e.norm());
                    let d_log = (e + LOG_FLOOR).ln() - (r + LOG_FLOOR).ln();
                    let d_lin = e - r;
                    total += (d_log.abs() + d_lin.abs()) * norm;
                    (sign(d_log) / (e + LOG_FLOOR) + sign(d_lin)) * norm
                })
                .collect();
            let g = scale.stft.magnitude_vjp(estimate.len(), &spec_e, &g_mag);
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok((total, grad))
    }
}

/// Mean absolute sample difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct WaveformLoss;

impl SignalLoss for WaveformLoss {
    fn kind(&self) -> LossKind {
        LossKind::Waveform
    }

    fn value_and_grad(&self, reference: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(reference, estimate)?;
        if estimate.is_empty() {
            return Err(Error::EmptySignal);
        }
        let n = estimate.len() as f64;
        let value = reference
            .iter()
            .zip(estimate)
            .map(|(r, e)| (e - r).abs())
            .sum::<f64>()
            / n;
        let grad = reference
            .iter()
            .zip(estimate)
            .map(|(r, e)| sign(e - r) / n)
            .collect();
        Ok((value, grad))
    }
}

fn buffer_loss(loss: &dyn SignalLoss, reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<LossValue> {
    reference.check_compatible(estimate)?;
    Ok(LossValue {
        value: loss.value(reference.samples(), estimate.samples())?,
        kind: loss.kind(),
    })
}

pub fn mel_loss(reference: &AudioBuffer, estimate: &AudioBuffer, scales: &[MelScale]) -> Result<LossValue> {
    buffer_loss(&MelLoss { scales: scales.to_vec() }, reference, estimate)
}

pub fn stft_loss(reference: &AudioBuffer, estimate: &AudioBuffer, scales: &[MelScale]) -> Result<LossValue> {
    buffer_loss(&StftLoss { scales: scales.to_vec() }, reference, estimate)
}

pub fn waveform_loss(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<LossValue> {
    buffer_loss(&WaveformLoss, reference, estimate)
}
