//! Wall-clock cost of one generator plus discriminator update for each
//! default-size branch.
//!
//! `cargo run --release --example step_timing -- 0.5` (crop seconds)

use std::time::Instant;

use sdc::autodiff::AdamConfig;
use sdc::branch::{Branch, BranchConfig, BranchTrainer, Discriminator, LossWeights};
use sdc::spectral::{default_scales, MelLoss};

fn main() -> sdc::Result<()> {
    let secs: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    for cfg in [BranchConfig::default_16k(), BranchConfig::default_32k()] {
        let rate = cfg.sample_rate;
        let len = ((secs * rate as f64) as usize / cfg.hop()) * cfg.hop();
        let mel = MelLoss { scales: default_scales(rate)? };
        let mut t = BranchTrainer::new(Branch::new(cfg, 0)?, Discriminator::new(1), AdamConfig::default(), 100, 0);
        let x = vec![(0..len).map(|i| (i as f64 * 0.05).sin() * 0.3).collect::<Vec<_>>()];
        t.step(&x, None, &x, &LossWeights::default(), &mel, "bench")?;
        let start = Instant::now();
        let n = 5;
        for _ in 0..n {
            t.step(&x, None, &x, &LossWeights::default(), &mel, "bench")?;
        }
        println!(
            "{rate} Hz, {len} samples: {:.3} s/step, {} params",
            start.elapsed().as_secs_f64() / n as f64,
            t.branch.params().num_scalars()
        );
    }
    Ok(())
}
