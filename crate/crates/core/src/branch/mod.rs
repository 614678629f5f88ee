//! One codec branch: encoder, residual vector quantizer, decoder, and its
//! waveform discriminator.

mod disc;
mod model;
mod train;

use serde::{Deserialize, Serialize};

pub use disc::{DiscOutput, Discriminator};
pub use model::{Branch, BranchOutput, BranchVars};
pub use train::{
    adversarial_losses, discriminator_loss, discriminator_step, generator_adversarial, generator_terms,
    AdversarialLosses, BranchTrainer, StepReport, TermVars,
};
pub(crate) use train::batch_constant;

use crate::error::{Error, Result};
use crate::spectral::LossKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub sample_rate: u32,
    pub encoder_strides: Vec<usize>,
    pub base_channels: usize,
    #[serde(default = "default_max_channels")]
    pub max_channels: usize,
    pub latent_dim: usize,
    pub n_quantizers: usize,
    pub codebook_bits: u32,
    #[serde(default = "default_residual_units")]
    pub residual_units: usize,
}

fn default_max_channels() -> usize {
    64
}

fn default_residual_units() -> usize {
    1
}

impl BranchConfig {
    /// 16 kHz branch at 50 frames per second.
    pub fn default_16k() -> Self {
        Self {
            sample_rate: 16_000,
            encoder_strides: vec![2, 4, 5, 8],
            base_channels: 16,
            max_channels: default_max_channels(),
            latent_dim: 64,
            n_quantizers: 4,
            codebook_bits: 10,
            residual_units: default_residual_units(),
        }
    }

    /// 32 kHz branch at 50 frames per second.
    pub fn default_32k() -> Self {
        Self {
            sample_rate: 32_000,
            encoder_strides: vec![2, 4, 8, 10],
            ..Self::default_16k()
        }
    }

    /// Samples per latent frame.
    pub fn hop(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop() as f64
    }

    pub fn codebook_size(&self) -> usize {
        1 << self.codebook_bits
    }

    /// Token payload rate in bits per second.
    pub fn bitrate(&self) -> f64 {
        self.frame_rate() * (self.n_quantizers as u64 * self.codebook_bits as u64) as f64
    }

    /// Channel width entering encoder block `i` (and leaving decoder block `i`).
    pub fn width(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels.max(self.base_channels))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.encoder_strides.is_empty() || self.encoder_strides.contains(&0) {
            return bad(format!("encoder_strides {:?} must be nonempty and positive", self.encoder_strides));
        }
        if self.sample_rate as usize % self.hop() != 0 {
            return bad(format!("stride product {} does not divide {}", self.hop(), self.sample_rate));
        }
        if self.base_channels == 0 || self.latent_dim == 0 || self.n_quantizers == 0 || self.residual_units > 3 {
            return bad("channels, latent_dim and n_quantizers must be positive; residual_units <= 3".into());
        }
        if !(1..=16).contains(&self.codebook_bits) {
            return bad(format!("codebook_bits {} outside 1..=16", self.codebook_bits));
        }
        Ok(())
    }
}

/// Per-branch coefficients of the five training terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gen: f64,
    pub fm: f64,
    pub mel: f64,
    pub cb: f64,
    pub cmt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gen: 1.0,
            fm: 2.0,
            mel: 15.0,
            cb: 1.0,
            cmt: 0.25,
        }
    }
}

impl LossWeights {
    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Gen => self.gen,
            LossKind::Fm => self.fm,
            LossKind::Mel => self.mel,
            LossKind::Cb => self.cb,
            LossKind::Cmt => self.cmt,
            LossKind::Stft | LossKind::Waveform => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in TERMS {
            let w = self.get(k);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!("weight for {k} is {w}")));
            }
        }
        Ok(())
    }
}

/// The five terms of a branch objective, in logging order.
pub const TERMS: [LossKind; 5] = [LossKind::Gen, LossKind::Fm, LossKind::Mel, LossKind::Cb, LossKind::Cmt];

/// Coefficients of a single branch total: `sum_l w_l * L_l`.
pub fn branch_coefficients(w: &LossWeights) -> [(LossKind, f64); 5] {
    TERMS.map(|k| (k, w.get(k)))
}

/// Coefficients of the joint objective: adversarial and mel terms of the two
/// branches are averaged, quantizer terms are added.
pub fn finetune_coefficients(w16: &LossWeights, w32: &LossWeights) -> [(LossKind, f64, f64); 5] {
    TERMS.map(|k| {
        let s = match k {
            LossKind::Cb | LossKind::Cmt => 1.0,
            _ => 0.5,
        };
        (k, s * w16.get(k), s * w32.get(k))
    })
}

/// Measured values of the branch terms; a term is `None` until computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gen: Option<f64>,
    pub fm: Option<f64>,
    pub mel: Option<f64>,
    pub cb: Option<f64>,
    pub cmt: Option<f64>,
}

impl LossBreakdown {
    pub fn uniform(v: f64) -> Self {
        Self {
            gen: Some(v),
            fm: Some(v),
            mel: Some(v),
            cb: Some(v),
            cmt: Some(v),
        }
    }

    pub fn get(&self, kind: LossKind) -> Option<f64> {
        match kind {
            LossKind::Gen => self.gen,
            LossKind::Fm => self.fm,
            LossKind::Mel => self.mel,
            LossKind::Cb => self.cb,
            LossKind::Cmt => self.cmt,
            LossKind::Stft | LossKind::Waveform => None,
        }
    }

    pub fn set(&mut self, kind: LossKind, v: f64) {
        match kind {
            LossKind::Gen => self.gen = Some(v),
            LossKind::Fm => self.fm = Some(v),
            LossKind::Mel => self.mel = Some(v),
            LossKind::Cb => self.cb = Some(v),
            LossKind::Cmt => self.cmt = Some(v),
            LossKind::Stft | LossKind::Waveform => {}
        }
    }

    fn require(&self, kind: LossKind) -> Result<f64> {
        self.get(kind).ok_or(Error::IncompleteBreakdown(kind.name()))
    }

    /// Weighted single-branch total.
    pub fn total(&self, w: &LossWeights) -> Result<f64> {
        branch_coefficients(w)
            .iter()
            .try_fold(0.0, |acc, &(k, c)| Ok(acc + c * self.require(k)?))
    }
}

/// Joint objective of both branches, as used while finetuning.
pub fn finetune_loss(b16: &LossBreakdown, b32: &LossBreakdown, w16: &LossWeights, w32: &LossWeights) -> Result<f64> {
    finetune_coefficients(w16, w32)
        .iter()
        .try_fold(0.0, |acc, &(k, c16, c32)| Ok(acc + c32 * b32.require(k)? + c16 * b16.require(k)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let a = BranchConfig::default_16k();
        let b = BranchConfig::default_32k();
        a.validate().unwrap();
        b.validate().unwrap();
        assert_eq!(a.hop(), 320);
        assert_eq!(b.hop(), 640);
        assert_eq!(a.frame_rate(), 50.0);
        assert_eq!(b.frame_rate(), 50.0);
        assert_eq!(a.bitrate(), 2000.0);
        assert_eq!(a.bitrate() + b.bitrate(), 4000.0);
        assert_eq!((0..5).map(|i| a.width(i)).collect::<Vec<_>>(), vec![16, 32, 64, 64, 64]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = BranchConfig::default_16k();
        c.encoder_strides = vec![3, 7];
        assert!(c.validate().is_err());
        let mut c = BranchConfig::default_16k();
        c.n_quantizers = 0;
        assert!(c.validate().is_err());
        let w = LossWeights {
            mel: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn unit_totals() {
        let w = LossWeights::default();
        assert_eq!(LossBreakdown::uniform(1.0).total(&w).unwrap(), 19.25);
        let one = LossBreakdown::uniform(1.0);
        assert_eq!(finetune_loss(&one, &one, &w, &w).unwrap(), 20.5);
        let zero = LossBreakdown::uniform(0.0);
        assert_eq!(finetune_loss(&zero, &zero, &w, &w).unwrap(), 0.0);
    }

    #[test]
    fn ablation_drops_adversarial_terms() {
        let w = LossWeights {
            gen: 0.0,
            fm: 0.0,
            ..Default::default()
        };
        let b = LossBreakdown {
            gen: Some(3.0),
            fm: Some(5.0),
            mel: Some(0.5),
            cb: Some(0.2),
            cmt: Some(0.4),
        };
        assert_eq!(b.total(&w).unwrap(), 15.0 * 0.5 + 0.2 + 0.25 * 0.4);
    }

    #[test]
    fn cb_is_added_not_averaged() {
        let w = LossWeights::default();
        let one = LossBreakdown::uniform(1.0);
        let mut two = one;
        two.cb = Some(2.0);
        let d = finetune_loss(&two, &one, &w, &w).unwrap() - finetune_loss(&one, &one, &w, &w).unwrap();
        assert_eq!(d, w.cb);
    }

    #[test]
    fn missing_term() {
        let mut b = LossBreakdown::uniform(1.0);
        b.fm = None;
        assert!(matches!(b.total(&LossWeights::default()), Err(Error::IncompleteBreakdown("fm"))));
    }
}
