//! Three-stage training of a small cascade on synthetic full-band audio,
//! followed by a band analysis of the high branch on held-out clips.
//!
//! `cargo run --release --example toy_training -- --scale 0.1`

use std::time::Instant;

use clap::Parser;
use sdc::cascade::{disentanglement_report, CascadeTrainer, Dataset, Stage, TrainConfig, TrainEvent};
use sdc::synth::{corpus, SynthConfig};

#[derive(Parser)]
struct Args {
    /// Fraction of the 2000/2000/1000 schedule to run.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Crop length in seconds; defaults to the desk-scale value.
    #[arg(long)]
    crop: Option<f64>,
    /// Learning rate; defaults to the desk-scale value.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory written after training.
    #[arg(long)]
    save: Option<std::path::PathBuf>,
}

fn main() -> sdc::Result<()> {
    let args = Args::parse();
    let mut cfg = TrainConfig {
        seed: args.seed,
        ..TrainConfig::desk_scale()
    };
    if let Some(c) = args.crop {
        cfg.crop_secs = c;
    }
    if let Some(lr) = args.lr {
        cfg.adam.lr = lr;
    }
    let s = &mut cfg.schedule;
    for n in [&mut s.stage1, &mut s.stage2, &mut s.finetune] {
        *n = ((*n as f64 * args.scale).round() as usize).max(1);
    }
    cfg.smoothing_window = (cfg.schedule.finetune / 10).max(1);

    let synth = SynthConfig {
        seed: args.seed,
        ..Default::default()
    };
    let mut trainer = CascadeTrainer::new(cfg)?;
    let data = Dataset::new(&trainer.cascade()?, corpus(&synth, 0)?)?;
    println!("training on {:.0} s of synthetic audio", data.total_secs());

    let start = Instant::now();
    let mut observer = |e: &TrainEvent| match e {
        TrainEvent::Step { stage, step, total, .. } if step % 100 == 0 => {
            println!("{stage} {step:5} total {total:.4} ({:.0} s)", start.elapsed().as_secs_f64())
        }
        TrainEvent::StageEnd { stage, summary } => println!(
            "{stage}: total {:.4} -> {:.4} ({:+.1}%), mel {:.4} -> {:.4} ({:+.1}%), first-window total {:.4}, frozen intact {}",
            summary.initial_total,
            summary.final_total,
            -100.0 * summary.total_drop(),
            summary.initial_mel,
            summary.final_mel,
            -100.0 * summary.mel_drop(),
            summary.head_total,
            summary.frozen_intact
        ),
        _ => {}
    };
    let report = trainer.run(&data, &mut observer, &mut |_, _| Ok(()))?;

    let cascade = trainer.cascade()?;
    if let Some(dir) = &args.save {
        cascade.save(dir, Some(Stage::Finetune))?;
    }
    let held_out = SynthConfig { clips: 4, ..synth };
    for (i, x) in corpus(&held_out, 1000)?.iter().enumerate() {
        let out = cascade.forward(x)?;
        let d = disentanglement_report(x, &out)?;
        println!(
            "held-out {i}: d32 energy low {:.3} high {:.3}; sdr {:.2} dB",
            d.d32_low_fraction, d.d32_high_fraction, d.overall_sdr
        );
    }
    let s1 = report.stage(Stage::Stage1).expect("stage 1 ran");
    let s2 = report.stage(Stage::Stage2).expect("stage 2 ran");
    println!(
        "stage1 mel drop {:.1}%, stage2 total drop {:.1}%, {:.0} s",
        100.0 * s1.mel_drop(),
        100.0 * s2.total_drop(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
