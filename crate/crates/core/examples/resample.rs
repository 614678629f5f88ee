//! Band-limited 2x resampling: a tone survives U then D, and content above
//! the low-rate Nyquist is removed by D.
//!
//! `cargo run --release --example resample`

use sdc::signal::{resample_down, resample_up, SincKernel};
use sdc::AudioBuffer;

fn tone(freq: f64, rate: u32, secs: f64) -> sdc::Result<AudioBuffer> {
    let n = (rate as f64 * secs) as usize;
    let x = (0..n).map(|i| (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin()).collect();
    AudioBuffer::new(x, rate)
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn main() -> sdc::Result<()> {
    let kernel = SincKernel::default();
    let x = tone(1000.0, 16_000, 1.0)?;
    let up = resample_up(&x, 2, &kernel)?;
    let back = resample_down(&up, 2, &kernel)?;
    let m = 256;
    let err: Vec<f64> = x.samples()[m..x.len() - m]
        .iter()
        .zip(&back.samples()[m..x.len() - m])
        .map(|(a, b)| a - b)
        .collect();
    println!(
        "1 kHz at 16 kHz: U gives {} samples at {} Hz, D(U(x)) interior error rms {:.2e}",
        up.len(),
        up.sample_rate(),
        rms(&err)
    );

    let high = tone(10_000.0, 32_000, 1.0)?;
    let folded = resample_down(&high, 2, &kernel)?;
    let s = folded.samples();
    println!(
        "10 kHz at 32 kHz through D: {:.1} dB relative to input",
        20.0 * (rms(&s[m..s.len() - m]) / rms(high.samples())).log10()
    );
    Ok(())
}
