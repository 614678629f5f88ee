//! End-to-end runs of the `sdc` binary on a tiny synthetic configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sdc::signal::{read_wav, write_wav, WavFormat};
use sdc::synth::{clip, SynthConfig};
use sdc::AudioBuffer;

const TINY: &str = r#"
output_dir = "run"

[data.synth]
clip_secs = 1.0
clips = 2
seed = 5

[train]
crop_secs = 0.1
smoothing_window = 2
mel_scales = [[256, 16], [64, 8]]

[train.schedule]
stage1 = 2
stage2 = 2
finetune = 1

[[train.cascade.branches]]
sample_rate = 16000
encoder_strides = [2, 4, 5, 8]
base_channels = 2
max_channels = 8
latent_dim = 4
n_quantizers = 2
codebook_bits = 4
residual_units = 1

[[train.cascade.branches]]
sample_rate = 32000
encoder_strides = [2, 4, 8, 10]
base_channels = 2
max_channels = 8
latent_dim = 4
n_quantizers = 2
codebook_bits = 4
residual_units = 1
"#;

fn sdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdc"))
        .args(args)
        .env("SDC_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sdc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn test_clip(index: usize) -> AudioBuffer {
    clip(
        &SynthConfig {
            clip_secs: 1.0,
            ..Default::default()
        },
        index,
    )
    .unwrap()
}

#[test]
fn train_then_code_evaluate_and_inpaint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&["train", "--config", p(&d.join("tiny.toml"))]);
    let run = d.join("run");
    let ckpt = run.join("checkpoint");
    assert!(ckpt.join("manifest.toml").is_file());
    assert!(run.join("train_report.json").is_file());
    let curve = fs::read_to_string(run.join("loss_curve.jsonl")).unwrap();
    // five steps plus a start and an end event per stage
    assert_eq!(curve.lines().count(), 11);

    let refs = d.join("refs");
    fs::create_dir(&refs).unwrap();
    for i in 0..2 {
        write_wav(refs.join(format!("clip{i}.wav")), &test_clip(100 + i), WavFormat::Pcm16).unwrap();
    }
    let input = refs.join("clip0.wav");
    let line = ok(&["encode", "--in", p(&input), "--ckpt", p(&ckpt), "--out", p(&d.join("a.sdc"))]);
    assert!(line.starts_with("branches=2 frames=50 payload_bps=800 "), "{line}");

    ok(&["decode", "--in", p(&d.join("a.sdc")), "--ckpt", p(&ckpt), "--out", p(&d.join("full.wav"))]);
    let full = read_wav(d.join("full.wav")).unwrap();
    assert_eq!((full.sample_rate(), full.len()), (32_000, 32_000));
    ok(&[
        "decode", "--in", p(&d.join("a.sdc")), "--ckpt", p(&ckpt), "--out", p(&d.join("low.wav")), "--band", "16k",
    ]);
    assert_eq!(read_wav(d.join("low.wav")).unwrap().sample_rate(), 16_000);

    let line = ok(&["eval", "--ref-dir", p(&refs), "--ckpt", p(&ckpt), "--out-dir", p(&d.join("eval"))]);
    assert!(line.contains("mel_loss="), "{line}");
    for f in ["clip0.json", "clip1.json", "aggregate.json", "summary.txt"] {
        assert!(d.join("eval").join(f).is_file(), "{f}");
    }

    let s32 = read_wav(&input).unwrap();
    let s16 = AudioBuffer::new(
        sdc::signal::Resampler::new(2, &Default::default()).unwrap().down(s32.samples()),
        16_000,
    )
    .unwrap();
    write_wav(d.join("in16.wav"), &s16, WavFormat::Float32).unwrap();
    let line = ok(&[
        "inpaint",
        "--in",
        p(&d.join("in16.wav")),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&d.join("inp.wav")),
        "--ref",
        p(&input),
    ]);
    let report: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert!(report["high_band_energy_db"].is_number());
    assert!(report["triple"]["inpainted"]["mel"].is_number());
    assert_eq!(read_wav(d.join("inp.wav")).unwrap().sample_rate(), 32_000);
    assert!(d.join("inp.json").is_file());
}

#[test]
fn self_evaluation_and_identity_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs");
    fs::create_dir(&refs).unwrap();
    write_wav(refs.join("x.wav"), &test_clip(7), WavFormat::Float32).unwrap();

    let line = ok(&["eval", "--ref-dir", p(&refs), "--est-dir", p(&refs), "--out-dir", p(&dir.path().join("same"))]);
    assert!(line.contains("mel_loss=0.000000") && line.contains("sdr_db=120.000000"), "{line}");

    let line = ok(&["eval", "--ref-dir", p(&refs), "--ckpt", "identity", "--out-dir", p(&dir.path().join("id"))]);
    let sdr: f64 = line
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("sdr_db="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(sdr > 60.0, "{line}");
}

#[test]
fn failures_print_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.wav");
    let out = sdc(&["encode", "--in", p(&missing), "--ckpt", "identity", "--out", "x.sdc"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().filter(|l| l.starts_with("error kind=")).count(), 1, "{err}");

    let out = sdc(&["encode", "--in", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=Usage"));

    fs::write(dir.path().join("bad.toml"), "output_dir = 3\n").unwrap();
    let out = sdc(&["train", "--config", p(&dir.path().join("bad.toml"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=InvalidConfig"));

    assert!(sdc(&["--help"]).status.success());
}
