use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use crate::bitstream::{BranchTokens, TokenStream};
use crate::cascade::{
    cascade_forward, inpaint, inpaint_triple, Cascade, CascadeConfig, CascadeTrainer, Codec, Dataset, IdentityCodec,
    InpaintTriple, Stage, TrainEvent, TrainReport,
};
use crate::error::{Error, Result};
use crate::metrics::{build_report, BandSpec, MetricReport};
use crate::signal::{load_for_codec, read_wav, write_wav, AudioBuffer, Resampler, WavFormat};
use crate::spectral::{default_scales, MelScale};
use crate::synth;

/// Name accepted in place of a checkpoint directory: both branches pass
/// their input through unchanged.
pub const IDENTITY_CKPT: &str = "identity";

/// A loaded model: trained weights or the identity oracle.
pub enum Model {
    Trained(Cascade),
    Identity {
        config: CascadeConfig,
        low: IdentityCodec,
        high: IdentityCodec,
    },
}

impl Model {
    pub fn load(ckpt: &Path) -> Result<Self> {
        if ckpt.as_os_str() == IDENTITY_CKPT {
            let config = CascadeConfig::default();
            return Ok(Model::Identity {
                low: IdentityCodec(config.branches[0].sample_rate),
                high: IdentityCodec(config.branches[1].sample_rate),
                config,
            });
        }
        Ok(Model::Trained(Cascade::load(ckpt)?.0))
    }

    pub fn config(&self) -> &CascadeConfig {
        match self {
            Model::Trained(c) => &c.config,
            Model::Identity { config, .. } => config,
        }
    }

    fn codecs(&self) -> (&dyn Codec, &dyn Codec) {
        match self {
            Model::Trained(c) => (&c.low, &c.high),
            Model::Identity { low, high, .. } => (low, high),
        }
    }

    fn trained(&self, what: &str) -> Result<&Cascade> {
        match self {
            Model::Trained(c) => Ok(c),
            Model::Identity { .. } => Err(Error::ConfigMismatch(format!(
                "{what} needs trained weights, not the identity oracle"
            ))),
        }
    }

    fn resampler(&self) -> Result<Resampler> {
        Resampler::new(self.config().factor(), &self.config().kernel)
    }

    fn rates(&self) -> (u32, u32) {
        let b = &self.config().branches;
        (b[0].sample_rate, b[1].sample_rate)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// WAV files directly inside `dir`, sorted by file name.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub report: TrainReport,
}

/// Trains all stages, saving the checkpoint after each stage and one JSON
/// line per training event.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_json(&out.join("run_config.json"), cfg)?;
    let mut trainer = CascadeTrainer::new(cfg.train.clone())?;
    let items = match (&cfg.data.train_dir, &cfg.data.synth) {
        (Some(dir), _) => {
            let rate = cfg.train.cascade.branches[1].sample_rate;
            list_wavs(dir)?
                .iter()
                .map(|p| load_for_codec(p, rate, cfg.data.auto_resample, &cfg.train.cascade.kernel))
                .collect::<Result<Vec<_>>>()?
        }
        (None, Some(s)) => synth::corpus(s, 0)?,
        (None, None) => return Err(Error::NoData),
    };
    let data = Dataset::new(&trainer.cascade()?, items)?;
    info!("{} files, {:.1} s of audio", data.len(), data.total_secs());

    let curve_path = out.join("loss_curve.jsonl");
    let file = File::create(&curve_path).map_err(|e| Error::io(&curve_path, e))?;
    let mut curve = BufWriter::new(file);
    let mut io_err = None;
    let mut observer = |e: &TrainEvent| {
        if io_err.is_some() {
            return;
        }
        let line = serde_json::to_string(e).expect("events serialize");
        if let Err(e) = writeln!(curve, "{line}") {
            io_err = Some(e);
        }
    };
    let ckpt = out.join("checkpoint");
    let report = trainer.run(&data, &mut observer, &mut |stage: Stage, c: &Cascade| {
        info!("{stage} done, saving {}", ckpt.display());
        c.save(&ckpt, Some(stage))
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&curve_path, e));
    }
    curve.flush().map_err(|e| Error::io(&curve_path, e))?;
    write_json(&out.join("train_report.json"), &report)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        loss_curve: curve_path,
        report,
    })
}

fn branch_tokens(cfg: &CascadeConfig, i: usize, tokens: Vec<Vec<usize>>) -> Result<BranchTokens> {
    let b = &cfg.branches[i];
    BranchTokens::new(b.sample_rate, b.codebook_bits as u8, tokens)
}

/// Codes `x`: a low-rate input yields the low branch only, a high-rate input
/// yields both branches.
pub fn encode_buffer(cascade: &Cascade, x: &AudioBuffer) -> Result<TokenStream> {
    let cfg = &cascade.config;
    let frame_rate = cfg.branches[0].frame_rate().round() as u32;
    let (low_rate, high_rate) = (cfg.branches[0].sample_rate, cfg.branches[1].sample_rate);
    if x.sample_rate() == low_rate {
        let t = cascade.low.encode(x)?;
        return TokenStream::new(frame_rate, vec![branch_tokens(cfg, 0, t)?]);
    }
    if x.sample_rate() != high_rate {
        return Err(Error::RateMismatch {
            expected: high_rate,
            actual: x.sample_rate(),
        });
    }
    let out = cascade.forward(x)?;
    let take = |t: Option<crate::rvq::RvqResult>| t.map(|r| r.tokens).ok_or(Error::NoData);
    TokenStream::new(
        frame_rate,
        vec![
            branch_tokens(cfg, 0, take(out.tokens_16)?)?,
            branch_tokens(cfg, 1, take(out.tokens_32)?)?,
        ],
    )
}

/// Checks that a stream was produced by a model with `cfg`'s layout.
fn check_stream(cfg: &CascadeConfig, s: &TokenStream) -> Result<()> {
    let frame_rate = cfg.branches[0].frame_rate().round() as u32;
    if s.frame_rate != frame_rate || s.branches.len() > cfg.branches.len() {
        return Err(Error::ConfigMismatch(format!(
            "stream has {} branches at {} Hz frames, model expects at most {} at {frame_rate} Hz",
            s.branches.len(),
            s.frame_rate,
            cfg.branches.len()
        )));
    }
    for (i, (b, c)) in s.branches.iter().zip(&cfg.branches).enumerate() {
        if b.sample_rate != c.sample_rate || b.n_quantizers() != c.n_quantizers || b.codebook_bits as u32 != c.codebook_bits {
            return Err(Error::ConfigMismatch(format!(
                "branch {i}: stream {} Hz {}x{} bits, model {} Hz {}x{} bits",
                b.sample_rate,
                b.n_quantizers(),
                b.codebook_bits,
                c.sample_rate,
                c.n_quantizers,
                c.codebook_bits
            )));
        }
    }
    Ok(())
}

/// Output band of [`decode_stream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DecodeBand {
    #[value(name = "16k")]
    Low,
    #[value(name = "32k")]
    Full,
}

/// `d_hat_16` for [`DecodeBand::Low`]; `U(d_hat_16) + d_hat_32` for
/// [`DecodeBand::Full`], which needs both branches in the stream.
pub fn decode_stream(cascade: &Cascade, s: &TokenStream, band: DecodeBand) -> Result<AudioBuffer> {
    check_stream(&cascade.config, s)?;
    let low = cascade.low.decode(&s.branches[0].tokens)?;
    match band {
        DecodeBand::Low => Ok(low),
        DecodeBand::Full => {
            let high_tokens = s.branches.get(1).ok_or_else(|| {
                Error::ConfigMismatch("32k output requested but the stream holds only the 16k branch".into())
            })?;
            let high = cascade.high.decode(&high_tokens.tokens)?;
            let up = AudioBuffer::new(cascade.resampler().up(low.samples()), high.sample_rate())?;
            up.add(&high)
        }
    }
}

pub fn cmd_encode(input: &Path, ckpt: &Path, out: &Path, auto_resample: bool) -> Result<TokenStream> {
    let model = Model::load(ckpt)?;
    let cascade = model.trained("encode")?;
    let x = read_wav(input)?;
    let (low, high) = model.rates();
    let x = if x.sample_rate() == low || x.sample_rate() == high {
        x
    } else {
        load_for_codec(input, high, auto_resample, &cascade.config.kernel)?
    };
    let s = encode_buffer(cascade, &x)?;
    s.write(out)?;
    info!(
        "{}: {} branch(es), {:.0} bps payload, {} bytes",
        out.display(),
        s.branches.len(),
        s.payload_bitrate(s.branches.len()),
        s.to_bytes().len()
    );
    Ok(s)
}

pub fn cmd_decode(input: &Path, ckpt: &Path, out: &Path, band: Option<DecodeBand>) -> Result<AudioBuffer> {
    let model = Model::load(ckpt)?;
    let cascade = model.trained("decode")?;
    let s = TokenStream::read(input)?;
    let band = band.unwrap_or(if s.branches.len() > 1 { DecodeBand::Full } else { DecodeBand::Low });
    let y = decode_stream(cascade, &s, band)?;
    write_wav(out, &y, WavFormat::Float32)?;
    Ok(y)
}

#[derive(Debug, Clone, Serialize)]
pub struct FileReport {
    pub file: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub files: Vec<FileReport>,
    /// Arithmetic mean over files.
    pub mean: MetricReport,
}

/// Where estimates come from in [`cmd_eval`].
pub enum EvalSource<'a> {
    /// Run the cascade on each reference.
    Model(&'a Model),
    /// Read the estimate with the same file name from this directory.
    Dir(&'a Path),
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Evaluates every WAV in `ref_dir` (in parallel, reported in sorted order)
/// and writes `<stem>.json` per file, `aggregate.json` and `summary.txt`.
pub fn cmd_eval(ref_dir: &Path, source: EvalSource<'_>, out_dir: &Path, bands: &[BandSpec]) -> Result<EvalSummary> {
    let refs = list_wavs(ref_dir)?;
    if refs.is_empty() {
        return Err(Error::NoData);
    }
    create_dir(out_dir)?;
    let files = refs
        .par_iter()
        .map(|path| -> Result<FileReport> {
            let reference = read_wav(path)?;
            let scales: Vec<MelScale> = default_scales(reference.sample_rate())?;
            let (reference, estimate) = match &source {
                EvalSource::Dir(dir) => {
                    let name = path.file_name().expect("listed files have names");
                    (reference, read_wav(dir.join(name))?)
                }
                EvalSource::Model(model) => {
                    let (low, high) = model.codecs();
                    let up = model.resampler()?;
                    let (_, high_rate) = model.rates();
                    if reference.sample_rate() != high_rate {
                        return Err(Error::RateMismatch {
                            expected: high_rate,
                            actual: reference.sample_rate(),
                        });
                    }
                    let s16 = AudioBuffer::new(up.down(reference.samples()), high_rate / up.factor() as u32)?;
                    let s32 = reference.slice(0, s16.len() * up.factor())?;
                    let out = cascade_forward(&s16, &s32, low, high, &up)?;
                    (s32, out.s_hat_32)
                }
            };
            let report = build_report(&reference, &estimate, bands, &scales)?;
            write_json(&out_dir.join(format!("{}.json", stem(path))), &report)?;
            Ok(FileReport {
                file: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = MetricReport::mean(&files.iter().map(|f| f.report.clone()).collect::<Vec<_>>())?;
    let summary = EvalSummary { files, mean };
    write_json(&out_dir.join("aggregate.json"), &summary)?;
    let mut text = String::new();
    for f in &summary.files {
        for (k, v) in f.report.rows() {
            text.push_str(&format!("{}.{k} = {v:.6}\n", f.file));
        }
    }
    for (k, v) in summary.mean.rows() {
        text.push_str(&format!("mean.{k} = {v:.6}\n"));
    }
    let path = out_dir.join("summary.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct InpaintReport {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Energy above the band edge relative to total energy, in dB.
    pub high_band_energy_db: f64,
    /// Same for `U(s_hat_16)`, the plain upsampled low branch.
    pub up_low_high_band_energy_db: f64,
    /// Present when a full-band reference was supplied.
    pub triple: Option<InpaintTriple>,
}

fn band_db(x: &AudioBuffer, band: BandSpec) -> Result<f64> {
    let f = crate::cascade::band_energy_fraction(x, band)?;
    Ok(10.0 * f.max(1e-30).log10())
}

/// Runs the cascade on a low-rate input and writes the full-rate result plus
/// `<out>.json`. With `reference` the three-way comparison is included.
pub fn cmd_inpaint(input: &Path, ckpt: &Path, out: &Path, reference: Option<&Path>) -> Result<InpaintReport> {
    let model = Model::load(ckpt)?;
    let (low_rate, high_rate) = model.rates();
    let s16 = read_wav(input)?;
    if s16.sample_rate() != low_rate {
        return Err(Error::RateMismatch {
            expected: low_rate,
            actual: s16.sample_rate(),
        });
    }
    let (low, high) = model.codecs();
    let up = model.resampler()?;
    let result = inpaint(&s16, low, high, &up)?;
    write_wav(out, &result.s_hat_32, WavFormat::Float32)?;
    let high_band = BandSpec::new(high_rate as f64 / up.factor() as f64 / 2.0, high_rate as f64 / 2.0)?;
    let triple = match reference {
        Some(r) => {
            let s32 = read_wav(r)?;
            if s32.sample_rate() != high_rate {
                return Err(Error::RateMismatch {
                    expected: high_rate,
                    actual: s32.sample_rate(),
                });
            }
            Some(inpaint_triple(&s32, &result, &up, &default_scales(high_rate)?)?)
        }
        None => None,
    };
    let report = InpaintReport {
        input: input.to_path_buf(),
        output: out.to_path_buf(),
        high_band_energy_db: band_db(&result.s_hat_32, high_band)?,
        up_low_high_band_energy_db: band_db(&result.up_d_hat_16, high_band)?,
        triple,
    };
    write_json(&out.with_extension("json"), &report)?;
    Ok(report)
}
