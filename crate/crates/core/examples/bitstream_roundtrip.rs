//! Encodes one second with an untrained cascade, parses the stream, and
//! decodes both the full stream and its 16 kHz prefix.
//!
//! `cargo run --release --example bitstream_roundtrip`

use sdc::bitstream::TokenStream;
use sdc::cascade::{Cascade, CascadeConfig};
use sdc::cli::{decode_stream, encode_buffer, DecodeBand};
use sdc::synth::{clip, SynthConfig};

fn main() -> sdc::Result<()> {
    let model = Cascade::new(CascadeConfig::default(), 0)?;
    let x = clip(
        &SynthConfig {
            clip_secs: 1.0,
            ..Default::default()
        },
        0,
    )?;
    let stream = encode_buffer(&model, &x)?;
    let bytes = stream.to_bytes();
    println!(
        "{} bytes ({} header), payload {} bps with both branches, {} bps with the first",
        bytes.len(),
        stream.header_len(),
        stream.payload_bitrate(2),
        stream.payload_bitrate(1)
    );
    let parsed = TokenStream::from_bytes(&bytes)?;
    println!("reserialized identically: {}", parsed.to_bytes() == bytes);

    let full = decode_stream(&model, &parsed, DecodeBand::Full)?;
    let prefix = TokenStream::from_bytes_prefix(&bytes, 1)?;
    let low = decode_stream(&model, &prefix, DecodeBand::Low)?;
    println!(
        "decoded {} samples at {} Hz; 16 kHz prefix gives {} samples at {} Hz",
        full.len(),
        full.sample_rate(),
        low.len(),
        low.sample_rate()
    );
    Ok(())
}
