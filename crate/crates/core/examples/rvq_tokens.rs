//! Residual vector quantization: per-stage residual energy, tokens and
//! lossless reconstruction from tokens.
//!
//! `cargo run --release --example rvq_tokens`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdc::autodiff::Tensor;
use sdc::rvq::{rvq_decode, rvq_encode, Codebook};

fn main() -> sdc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (dim, frames) = (4, 6);
    let books: Vec<Codebook> = [1.0, 0.5, 0.25, 0.125]
        .iter()
        .map(|&s| Codebook::random(64, dim, s, &mut rng))
        .collect::<sdc::Result<_>>()?;
    let latent = Tensor::new(vec![1, dim, frames], (0..dim * frames).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let r = rvq_encode(&latent, &books)?;
    println!("input energy {:.4}", latent.data().iter().map(|v| v * v).sum::<f64>());
    for (s, (e, t)) in r.residual_energy.iter().zip(&r.tokens).enumerate() {
        println!("stage {s}: residual energy {e:.4}, tokens {t:?}");
    }
    let decoded = rvq_decode(&r.tokens, &books, 1)?;
    println!("decode(tokens) == quantized: {}", decoded.data() == r.quantized.data());
    Ok(())
}
