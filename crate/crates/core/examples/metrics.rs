//! SDR, scale-invariant SDR and per-band SDR of a signal with added
//! high-band noise.
//!
//! `cargo run --release --example metrics`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdc::metrics::{band_filter, build_report, BandSpec};
use sdc::spectral::default_scales;
use sdc::synth::{clip, SynthConfig};
use sdc::AudioBuffer;

fn main() -> sdc::Result<()> {
    let x = clip(&SynthConfig::default(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let white = AudioBuffer::new((0..x.len()).map(|_| rng.gen_range(-0.05..0.05)).collect(), x.sample_rate())?;
    let y = x.add(&band_filter(&white, BandSpec::HIGH)?)?;
    let bands = [BandSpec::LOW, BandSpec::HIGH, BandSpec::INTERFACE];
    let report = build_report(&x, &y, &bands, &default_scales(x.sample_rate())?)?;
    for (k, v) in report.rows() {
        println!("{k} = {v:.4}");
    }
    Ok(())
}
