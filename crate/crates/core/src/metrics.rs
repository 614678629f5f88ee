//! Evaluation metrics: SDR, band-restricted SDR, SI-SDR and the aggregated
//! per-file report.

use std::fmt;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioBuffer;
use crate::spectral::{mel_loss, stft_loss, waveform_loss, MelScale};

/// Reported dB values are clamped to +-DB_CAP.
pub const DB_CAP: f64 = 120.0;

/// A band whose reference energy is below this fraction of the total is
/// treated as empty.
const EMPTY_BAND_FRACTION: f64 = 1e-10;

/// Half-open frequency band `[low, high)` in Hz; `high` is inclusive when it
/// equals the Nyquist frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub low: f64,
    pub high: f64,
}

impl BandSpec {
    pub const LOW: BandSpec = BandSpec { low: 0.0, high: 8000.0 };
    pub const HIGH: BandSpec = BandSpec { low: 8000.0, high: 16000.0 };
    pub const INTERFACE: BandSpec = BandSpec { low: 7900.0, high: 8100.0 };

    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low >= 0.0 && low < high) {
            return Err(Error::InvalidConfig(format!("band [{low}, {high}] Hz")));
        }
        Ok(Self { low, high })
    }

    fn check(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.low >= 0.0 && self.low < self.high && self.high <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "band {self} outside [0, {nyquist}] Hz"
            )));
        }
        Ok(())
    }

    fn contains(&self, f: f64, nyquist: f64) -> bool {
        f >= self.low && (f < self.high || (f == self.high && self.high == nyquist))
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.low, self.high)
    }
}

impl fmt::Display for BandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}-{} Hz]", self.low, self.high)
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if noise <= 0.0 {
        return if signal > 0.0 { DB_CAP } else { -DB_CAP };
    }
    if signal <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (signal / noise).log10()).clamp(-DB_CAP, DB_CAP)
}

fn check_pair(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<()> {
    reference.check_compatible(estimate)?;
    if reference.is_empty() {
        return Err(Error::EmptySignal);
    }
    Ok(())
}

/// `10 log10(|ref|^2 / |ref - est|^2)`, capped at +-120 dB.
pub fn sdr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    check_pair(reference, estimate)?;
    let e_ref = energy(reference.samples());
    if e_ref == 0.0 {
        return Err(Error::UndefinedReference("reference is all-zero".into()));
    }
    let e_err: f64 = reference
        .samples()
        .iter()
        .zip(estimate.samples())
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    Ok(ratio_db(e_ref, e_err))
}

/// Scale-invariant SDR: the reference is rescaled by the least-squares gain
/// `<est, ref> / |ref|^2` before measuring distortion.
pub fn si_sdr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    check_pair(reference, estimate)?;
    let r = reference.samples();
    let e = estimate.samples();
    let e_ref = energy(r);
    if e_ref == 0.0 {
        return Err(Error::UndefinedReference("reference is all-zero".into()));
    }
    let alpha = r.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / e_ref;
    let target = alpha * alpha * e_ref;
    let noise: f64 = r
        .iter()
        .zip(e)
        .map(|(a, b)| {
            let d = b - alpha * a;
            d * d
        })
        .sum();
    Ok(ratio_db(target, noise))
}

/// Brick-wall band-pass: full-length FFT, zero every bin outside the band,
/// inverse FFT. Complementary bands partition the spectrum exactly.
pub fn band_filter(x: &AudioBuffer, band: BandSpec) -> Result<AudioBuffer> {
    band.check(x.sample_rate())?;
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x.samples().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let rate = x.sample_rate() as f64;
    let nyquist = rate / 2.0;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        if !band.contains(f, nyquist) {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    AudioBuffer::new(buf.iter().map(|c| c.re * scale).collect(), x.sample_rate())
}

/// SDR after restricting both signals to `band`.
pub fn band_sdr(reference: &AudioBuffer, estimate: &AudioBuffer, band: BandSpec) -> Result<f64> {
    check_pair(reference, estimate)?;
    let r = band_filter(reference, band)?;
    let band_energy = r.energy();
    if band_energy == 0.0 || band_energy <= EMPTY_BAND_FRACTION * reference.energy() {
        return Err(Error::UndefinedReference(format!(
            "reference has no energy in {band}"
        )));
    }
    let e = band_filter(estimate, band)?;
    sdr(&r, &e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSdr {
    pub band: BandSpec,
    pub sdr_db: f64,
}

/// Reconstruction metrics for one (reference, estimate) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mel: f64,
    pub stft: f64,
    pub waveform: f64,
    pub si_sdr: f64,
    pub sdr: f64,
    pub sdr_per_band: Vec<BandSdr>,
}

fn tagged<T>(metric: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Metric {
        metric: metric.to_string(),
        source: Box::new(e),
    })
}

pub fn build_report(
    reference: &AudioBuffer,
    estimate: &AudioBuffer,
    bands: &[BandSpec],
    scales: &[MelScale],
) -> Result<MetricReport> {
    let sdr_per_band = bands
        .iter()
        .map(|&band| {
            let v = tagged(&format!("sdr{band}"), band_sdr(reference, estimate, band))?;
            Ok(BandSdr { band, sdr_db: v })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        mel: tagged("mel", mel_loss(reference, estimate, scales))?.value,
        stft: tagged("stft", stft_loss(reference, estimate, scales))?.value,
        waveform: tagged("waveform", waveform_loss(reference, estimate))?.value,
        si_sdr: tagged("si_sdr", si_sdr(reference, estimate))?,
        sdr: tagged("sdr", sdr(reference, estimate))?,
        sdr_per_band,
    })
}

impl MetricReport {
    /// Flat `key = value` rows.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("mel_loss".to_string(), self.mel),
            ("stft_loss".to_string(), self.stft),
            ("waveform_loss".to_string(), self.waveform),
            ("si_sdr_db".to_string(), self.si_sdr),
            ("sdr_db".to_string(), self.sdr),
        ];
        rows.extend(
            self.sdr_per_band
                .iter()
                .map(|b| (format!("sdr_db[{}]", b.band.label()), b.sdr_db)),
        );
        rows
    }

    /// Arithmetic mean of several reports with identical band lists.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        let first = reports.first().ok_or(Error::NoData)?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut bands = Vec::with_capacity(first.sdr_per_band.len());
        for (i, b) in first.sdr_per_band.iter().enumerate() {
            if reports.iter().any(|r| r.sdr_per_band.get(i).map(|x| x.band) != Some(b.band)) {
                return Err(Error::shape("reports have different band lists"));
            }
            bands.push(BandSdr {
                band: b.band,
                sdr_db: avg(&|r| r.sdr_per_band[i].sdr_db),
            });
        }
        Ok(MetricReport {
            mel: avg(&|r| r.mel),
            stft: avg(&|r| r.stft),
            waveform: avg(&|r| r.waveform),
            si_sdr: avg(&|r| r.si_sdr),
            sdr: avg(&|r| r.sdr),
            sdr_per_band: bands,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.rows() {
            writeln!(f, "{k} = {v:.6}")?;
        }
        Ok(())
    }
}
