//! Command-line surface: run configuration, the five commands, and the
//! error line printed on failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::info;

pub use commands::{
    cmd_decode, cmd_encode, cmd_eval, cmd_inpaint, cmd_train, decode_stream, encode_buffer, list_wavs, DecodeBand,
    EvalSource, EvalSummary, FileReport, InpaintReport, Model, TrainOutcome, IDENTITY_CKPT,
};
pub use config::{DataConfig, RunConfig};

use crate::error::{Error, Result};
use crate::metrics::BandSpec;

/// Environment variable holding the log filter, e.g. `SDC_LOG=debug`.
pub const LOG_ENV: &str = "SDC_LOG";

#[derive(Debug, Parser)]
#[command(name = "sdc", version, about = "Two-branch neural audio codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train both branches from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Code a WAV file into a token stream.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resample inputs at other rates instead of rejecting them.
        #[arg(long)]
        auto_resample: bool,
    },
    /// Decode a token stream into a WAV file.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        band: Option<DecodeBand>,
    },
    /// Score every WAV in a directory and write per-file and mean reports.
    Eval {
        #[arg(long)]
        ref_dir: PathBuf,
        /// Checkpoint directory, or `identity`.
        #[arg(long, required_unless_present = "est_dir", conflicts_with = "est_dir")]
        ckpt: Option<PathBuf>,
        /// Score precomputed estimates with matching file names instead.
        #[arg(long)]
        est_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Bands for per-band SDR as `low-high` in Hz.
        #[arg(long, value_delimiter = ',', default_value = "0-8000,8000-16000,7900-8100")]
        bands: Vec<String>,
    },
    /// Run the cascade on a 16 kHz file to produce a 32 kHz file.
    Inpaint {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Full-band original for the three-way comparison.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
}

fn parse_band(s: &str) -> Result<BandSpec> {
    let (lo, hi) = s
        .split_once('-')
        .ok_or_else(|| Error::InvalidConfig(format!("band `{s}` is not `low-high`")))?;
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("band `{s}` is not `low-high`")))
    };
    BandSpec::new(num(lo)?, num(hi)?)
}

fn json_line(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("reports serialize")
}

/// Executes one parsed command and returns the line to print on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let out = cmd_train(&cfg)?;
            Ok(json_line(&out))
        }
        Command::Encode {
            input,
            ckpt,
            out,
            auto_resample,
        } => {
            let s = cmd_encode(&input, &ckpt, &out, auto_resample)?;
            Ok(format!(
                "branches={} frames={} payload_bps={} bytes={}",
                s.branches.len(),
                s.branches[0].frame_count(),
                s.payload_bitrate(s.branches.len()),
                s.to_bytes().len()
            ))
        }
        Command::Decode { input, ckpt, out, band } => {
            let y = cmd_decode(&input, &ckpt, &out, band)?;
            Ok(format!("rate={} samples={}", y.sample_rate(), y.len()))
        }
        Command::Eval {
            ref_dir,
            ckpt,
            est_dir,
            out_dir,
            bands,
        } => {
            let bands = bands.iter().map(|b| parse_band(b)).collect::<Result<Vec<_>>>()?;
            let model;
            let source = match (&ckpt, &est_dir) {
                (Some(c), _) => {
                    model = Model::load(c)?;
                    EvalSource::Model(&model)
                }
                (None, Some(d)) => EvalSource::Dir(d),
                (None, None) => return Err(Error::InvalidConfig("eval needs --ckpt or --est-dir".into())),
            };
            let s = cmd_eval(&ref_dir, source, &out_dir, &bands)?;
            info!("{} files evaluated", s.files.len());
            Ok(s.mean.rows().iter().map(|(k, v)| format!("{k}={v:.6}")).collect::<Vec<_>>().join(" "))
        }
        Command::Inpaint {
            input,
            ckpt,
            out,
            reference,
        } => {
            let r = cmd_inpaint(&input, &ckpt, &out, reference.as_deref())?;
            Ok(json_line(&r))
        }
    }
}

/// Single-line, `key=value` description of a failure.
pub fn error_line(e: &Error) -> String {
    format!("error kind={} message={:?}", e.kind(), config::one_line(&e.to_string()))
}

/// Entry point of the `sdc` binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error kind=Usage message={first:?}");
            return 2;
        }
    };
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
