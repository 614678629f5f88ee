//! The residual cascade with oracle branch codecs: identity codecs recover
//! the full-band input, and a silent high branch leaves U(d16).
//!
//! `cargo run --release --example cascade_oracle`

use sdc::cascade::{cascade_forward, IdentityCodec, ZeroCodec};
use sdc::metrics::sdr;
use sdc::signal::{Resampler, SincKernel};
use sdc::synth::{clip, SynthConfig};
use sdc::AudioBuffer;

fn main() -> sdc::Result<()> {
    let up = Resampler::new(2, &SincKernel::default())?;
    let s32 = clip(&SynthConfig::default(), 0)?;
    let s16 = AudioBuffer::new(up.down(s32.samples()), 16_000)?;

    let out = cascade_forward(&s16, &s32, &IdentityCodec(16_000), &IdentityCodec(32_000), &up)?;
    println!("identity codecs: sdr(s32, S32) = {:.1} dB", sdr(&s32, &out.s_hat_32)?);
    println!("U(d16) alone: sdr = {:.1} dB", sdr(&s32, &out.up_d_hat_16)?);

    let out = cascade_forward(&s16, &s32, &IdentityCodec(16_000), &ZeroCodec(32_000), &up)?;
    println!(
        "silent high branch: S32 == U(d16) exactly: {}",
        out.s_hat_32.samples() == out.up_d_hat_16.samples()
    );
    Ok(())
}
