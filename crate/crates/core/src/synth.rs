//! Seeded synthetic full-band material: gated tones and band-limited noise
//! placed on both sides of the 8 kHz split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{band_filter, BandSpec};
use crate::signal::AudioBuffer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub clip_secs: f64,
    pub clips: usize,
    /// Tones per clip in each of the low and high bands.
    pub tones_per_band: usize,
    /// Noise RMS relative to the tone RMS.
    pub noise_level: f64,
    pub peak: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 32_000,
            clip_secs: 4.0,
            clips: 32,
            tones_per_band: 3,
            noise_level: 0.3,
            peak: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn total_secs(&self) -> f64 {
        self.clip_secs * self.clips as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate < 32_000 {
            return Err(Error::InvalidConfig(format!(
                "synthetic rate {} cannot hold content above 8 kHz",
                self.sample_rate
            )));
        }
        if !(self.clip_secs > 0.0 && self.peak > 0.0 && self.noise_level >= 0.0) || self.clips == 0 {
            return Err(Error::InvalidConfig("clip_secs, clips and peak must be positive".into()));
        }
        Ok(())
    }
}

/// Frequency ranges (Hz) the tones are drawn from, clear of the split.
const LOW_TONES: (f64, f64) = (100.0, 7400.0);
const HIGH_TONES: (f64, f64) = (8600.0, 15000.0);
const LOW_NOISE: (f64, f64) = (200.0, 7600.0);
const HIGH_NOISE: (f64, f64) = (8400.0, 15200.0);

/// Gated sinusoid: on/off segments of 0.1 to 0.6 s with 5 ms ramps.
fn gated_tone(rng: &mut ChaCha8Rng, len: usize, rate: f64, band: (f64, f64), out: &mut [f64]) {
    let f = rng.gen_range(band.0..band.1);
    let amp = rng.gen_range(0.3..1.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp = (0.005 * rate) as usize;
    let mut start = 0;
    let mut on = rng.gen_bool(0.7);
    while start < len {
        let seg = ((rng.gen_range(0.1..0.6) * rate) as usize).min(len - start);
        if on {
            for i in 0..seg {
                let edge = (i.min(seg - 1 - i) as f64 / ramp as f64).min(1.0);
                let n = (start + i) as f64;
                out[start + i] += amp * edge * (std::f64::consts::TAU * f * n / rate + phase).sin();
            }
        }
        start += seg;
        on = !on;
    }
}

fn band_noise(rng: &mut ChaCha8Rng, len: usize, rate: u32, band: (f64, f64)) -> Result<Vec<f64>> {
    let white = AudioBuffer::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), rate)?;
    Ok(band_filter(&white, BandSpec::new(band.0, band.1)?)?.into_samples())
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// One clip; deterministic in `(cfg.seed, index)`.
pub fn clip(cfg: &SynthConfig, index: usize) -> Result<AudioBuffer> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let rate = cfg.sample_rate as f64;
    let len = (cfg.clip_secs * rate).round() as usize;
    let mut x = vec![0.0; len];
    for band in [LOW_TONES, HIGH_TONES] {
        for _ in 0..cfg.tones_per_band {
            gated_tone(&mut rng, len, rate, band, &mut x);
        }
    }
    let tone_rms = rms(&x).max(1e-3);
    for band in [LOW_NOISE, HIGH_NOISE] {
        let n = band_noise(&mut rng, len, cfg.sample_rate, band)?;
        let gain = cfg.noise_level * tone_rms / rms(&n).max(1e-12);
        x.iter_mut().zip(&n).for_each(|(a, b)| *a += gain * b);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= cfg.peak / peak);
    }
    AudioBuffer::new(x, cfg.sample_rate)
}

/// `cfg.clips` clips starting at `first_index`.
pub fn corpus(cfg: &SynthConfig, first_index: usize) -> Result<Vec<AudioBuffer>> {
    (first_index..first_index + cfg.clips).map(|i| clip(cfg, i)).collect()
}
