//! Two-branch cascade: the 16 kHz branch codes the low-rate signal, the
//! 32 kHz branch codes what its upsampled output leaves behind, and the
//! decoded signals are summed.

mod store;
mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use train::{
    finetune_terms, train_cascade, CascadeTrainer, Dataset, Schedule, Stage, StageSummary, TrainConfig, TrainEvent,
    TrainReport,
};

use crate::branch::{Branch, BranchConfig, LossWeights};
use crate::error::{Error, Result};
use crate::metrics::{band_sdr, build_report, sdr, BandSpec, MetricReport};
use crate::rvq::RvqResult;
use crate::signal::{AudioBuffer, Resampler, SincKernel};
use crate::spectral::MelScale;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Ascending sample rates; exactly two in this version.
    pub branches: Vec<BranchConfig>,
    pub loss_weights: Vec<LossWeights>,
    pub kernel: SincKernel,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            branches: vec![BranchConfig::default_16k(), BranchConfig::default_32k()],
            loss_weights: vec![LossWeights::default(); 2],
            kernel: SincKernel::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.len() != 2 || self.loss_weights.len() != 2 {
            return Err(Error::InvalidConfig("exactly two branches and two weight sets are supported".into()));
        }
        for b in &self.branches {
            b.validate()?;
        }
        for w in &self.loss_weights {
            w.validate()?;
        }
        self.kernel.validate()?;
        let (lo, hi) = (&self.branches[0], &self.branches[1]);
        if hi.sample_rate <= lo.sample_rate || hi.sample_rate % lo.sample_rate != 0 {
            return Err(Error::InvalidConfig(format!(
                "branch rates {} and {} are not ascending integer multiples",
                lo.sample_rate, hi.sample_rate
            )));
        }
        if lo.frame_rate() != hi.frame_rate() {
            return Err(Error::InvalidConfig(format!(
                "frame rates differ: {} vs {}",
                lo.frame_rate(),
                hi.frame_rate()
            )));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        (self.branches[1].sample_rate / self.branches[0].sample_rate) as usize
    }
}

/// Something that maps a signal to a decoded signal of the same rate and
/// length.
pub trait Codec: Send + Sync {
    fn sample_rate(&self) -> u32;
    fn code(&self, x: &AudioBuffer) -> Result<Coded>;
}

#[derive(Debug, Clone)]
pub struct Coded {
    pub decoded: AudioBuffer,
    pub tokens: Option<RvqResult>,
}

impl Codec for Branch {
    fn sample_rate(&self) -> u32 {
        self.config().sample_rate
    }

    fn code(&self, x: &AudioBuffer) -> Result<Coded> {
        let out = self.forward(x)?;
        Ok(Coded {
            decoded: out.decoded,
            tokens: Some(out.tokens),
        })
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCodec(pub u32);

impl Codec for IdentityCodec {
    fn sample_rate(&self) -> u32 {
        self.0
    }

    fn code(&self, x: &AudioBuffer) -> Result<Coded> {
        Ok(Coded {
            decoded: x.clone(),
            tokens: None,
        })
    }
}

/// Returns silence of the input's length.
#[derive(Debug, Clone, Copy)]
pub struct ZeroCodec(pub u32);

impl Codec for ZeroCodec {
    fn sample_rate(&self) -> u32 {
        self.0
    }

    fn code(&self, x: &AudioBuffer) -> Result<Coded> {
        Ok(Coded {
            decoded: AudioBuffer::zeros(x.len(), x.sample_rate()),
            tokens: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub s_hat_16: AudioBuffer,
    pub s_hat_32: AudioBuffer,
    pub d_hat_16: AudioBuffer,
    pub d_hat_32: AudioBuffer,
    /// `U(d_hat_16)`, the term the high branch is conditioned on.
    pub up_d_hat_16: AudioBuffer,
    pub tokens_16: Option<RvqResult>,
    pub tokens_32: Option<RvqResult>,
}

/// `s_hat_32 = U(d_hat_16) + d_hat_32`, where the high branch codes
/// `s32 - U(d_hat_16)`.
pub fn cascade_forward(
    s16: &AudioBuffer,
    s32: &AudioBuffer,
    low: &dyn Codec,
    high: &dyn Codec,
    up: &Resampler,
) -> Result<CascadeOutput> {
    let f = up.factor();
    if s16.sample_rate() != low.sample_rate()
        || s32.sample_rate() != high.sample_rate()
        || s32.sample_rate() != s16.sample_rate() * f as u32
    {
        return Err(Error::shape(format!(
            "cascade rates {} / {} do not match codecs {} / {} with factor {f}",
            s16.sample_rate(),
            s32.sample_rate(),
            low.sample_rate(),
            high.sample_rate()
        )));
    }
    if s32.len() != f * s16.len() {
        return Err(Error::shape(format!(
            "high-rate length {} is not {f} x {}",
            s32.len(),
            s16.len()
        )));
    }
    let c16 = low.code(s16)?;
    let d16 = c16.decoded;
    if d16.len() != s16.len() {
        return Err(Error::shape("low codec changed the signal length"));
    }
    let up_d16 = AudioBuffer::new(up.up(d16.samples()), s32.sample_rate())?;
    let residual = s32.sub(&up_d16)?;
    let c32 = high.code(&residual)?;
    let s_hat_32 = up_d16.add(&c32.decoded)?;
    Ok(CascadeOutput {
        s_hat_16: d16.clone(),
        s_hat_32,
        d_hat_16: d16,
        d_hat_32: c32.decoded,
        up_d_hat_16: up_d16,
        tokens_16: c16.tokens,
        tokens_32: c32.tokens,
    })
}

/// Cascade fed with `s16` and `U(s16)`, so the high branch sees nothing
/// above the low band edge.
pub fn inpaint(s16: &AudioBuffer, low: &dyn Codec, high: &dyn Codec, up: &Resampler) -> Result<CascadeOutput> {
    let u = AudioBuffer::new(up.up(s16.samples()), s16.sample_rate() * up.factor() as u32)?;
    cascade_forward(s16, &u, low, high, up)
}

/// Trained pair of branches with the resampler that couples them.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub config: CascadeConfig,
    pub low: Branch,
    pub high: Branch,
    up: Arc<Resampler>,
}

impl Cascade {
    pub fn new(config: CascadeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let low = Branch::new(config.branches[0].clone(), seed)?;
        let high = Branch::new(config.branches[1].clone(), seed.wrapping_add(1))?;
        Self::from_branches(config, low, high)
    }

    pub fn from_branches(config: CascadeConfig, low: Branch, high: Branch) -> Result<Self> {
        config.validate()?;
        if low.config() != &config.branches[0] || high.config() != &config.branches[1] {
            return Err(Error::ConfigMismatch("branch configs differ from cascade config".into()));
        }
        let up = Arc::new(Resampler::new(config.factor(), &config.kernel)?);
        Ok(Self { config, low, high, up })
    }

    pub fn resampler(&self) -> &Arc<Resampler> {
        &self.up
    }

    /// `D(s32)`, the low-rate input derived from a high-rate signal.
    pub fn derive_low(&self, s32: &AudioBuffer) -> Result<AudioBuffer> {
        let d = self.up.down(s32.samples());
        AudioBuffer::new(d, s32.sample_rate() / self.up.factor() as u32)
    }

    /// Runs the cascade on `s32`, trimmed to a whole number of low-rate
    /// samples.
    pub fn forward(&self, s32: &AudioBuffer) -> Result<CascadeOutput> {
        let s16 = self.derive_low(s32)?;
        let s32 = s32.slice(0, s16.len() * self.up.factor())?;
        cascade_forward(&s16, &s32, &self.low, &self.high, &self.up)
    }

    pub fn inpaint(&self, s16: &AudioBuffer) -> Result<CascadeOutput> {
        inpaint(s16, &self.low, &self.high, &self.up)
    }
}

/// Band analysis of a cascade output against the high-rate reference.
#[derive(Debug, Clone, Serialize)]
pub struct DisentanglementReport {
    pub d32_low_sdr: f64,
    pub d32_high_sdr: f64,
    pub interface_sdr: f64,
    pub overall_sdr: f64,
    pub interface_gap: f64,
    /// Share of `d_hat_32` energy below the band edge.
    pub d32_low_fraction: f64,
    /// Share of `d_hat_32` energy above the band edge.
    pub d32_high_fraction: f64,
}

/// Energy share of `x` inside `band`.
pub fn band_energy_fraction(x: &AudioBuffer, band: BandSpec) -> Result<f64> {
    let total = x.energy();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(crate::metrics::band_filter(x, band)?.energy() / total)
}

pub fn disentanglement_report(s32: &AudioBuffer, out: &CascadeOutput) -> Result<DisentanglementReport> {
    let interface_sdr = band_sdr(s32, &out.s_hat_32, BandSpec::INTERFACE)?;
    let overall_sdr = sdr(s32, &out.s_hat_32)?;
    Ok(DisentanglementReport {
        d32_low_sdr: band_sdr(s32, &out.d_hat_32, BandSpec::LOW)?,
        d32_high_sdr: band_sdr(s32, &out.d_hat_32, BandSpec::HIGH)?,
        interface_sdr,
        overall_sdr,
        interface_gap: (interface_sdr - overall_sdr).abs(),
        d32_low_fraction: band_energy_fraction(&out.d_hat_32, BandSpec::LOW)?,
        d32_high_fraction: band_energy_fraction(&out.d_hat_32, BandSpec::HIGH)?,
    })
}

/// Reconstruction metrics of the three inpainting candidates against the
/// full-band reference: `U(s_hat_16)`, `U(D(s_hat_32))` and `s_hat_32`.
#[derive(Debug, Clone, Serialize)]
pub struct InpaintTriple {
    pub up_low: MetricReport,
    pub up_down_inpainted: MetricReport,
    pub inpainted: MetricReport,
}

pub fn inpaint_triple(
    s32: &AudioBuffer,
    out: &CascadeOutput,
    up: &Resampler,
    scales: &[MelScale],
) -> Result<InpaintTriple> {
    let rate = s32.sample_rate();
    let ud = AudioBuffer::new(up.up(&up.down(out.s_hat_32.samples())), rate)?;
    let s32 = s32.slice(0, ud.len().min(s32.len()))?;
    let fit = |x: &AudioBuffer| x.slice(0, s32.len());
    Ok(InpaintTriple {
        up_low: build_report(&s32, &fit(&out.up_d_hat_16)?, &[], scales)?,
        up_down_inpainted: build_report(&s32, &fit(&ud)?, &[], scales)?,
        inpainted: build_report(&s32, &fit(&out.s_hat_32)?, &[], scales)?,
    })
}
