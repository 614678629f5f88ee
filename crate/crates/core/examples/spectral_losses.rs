//! Multi-scale log-mel, STFT and waveform losses of a degraded signal.
//!
//! `cargo run --release --example spectral_losses`

use sdc::spectral::{default_scales, mel_loss, stft_loss, waveform_loss};
use sdc::synth::{clip, SynthConfig};

fn main() -> sdc::Result<()> {
    let x = clip(&SynthConfig::default(), 0)?;
    let scales = default_scales(x.sample_rate())?;
    for gain in [1.0, 0.9, 0.5, 0.0] {
        let y = x.scale(gain);
        println!(
            "gain {gain:.1}: mel {:.4} stft {:.4} waveform {:.4}",
            mel_loss(&x, &y, &scales)?.value,
            stft_loss(&x, &y, &scales)?.value,
            waveform_loss(&x, &y)?.value
        );
    }
    Ok(())
}
