use std::fmt;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cascade, CascadeConfig};
use crate::autodiff::{AdamConfig, Graph, Var};
use crate::branch::{
    batch_constant, finetune_coefficients, finetune_loss, generator_terms, BranchTrainer, Discriminator, LossBreakdown, LossWeights,
    StepReport, TermVars,
};
use crate::error::{Error, Result};
use crate::signal::AudioBuffer;
use crate::spectral::{scales_from, MelLoss, DEFAULT_SCALES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub stage1: usize,
    pub stage2: usize,
    pub finetune: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            stage1: 2000,
            stage2: 2000,
            finetune: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Low branch alone.
    Stage1,
    /// High branch on the residual, low branch frozen.
    Stage2,
    /// Both branches on the joint objective.
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Stage1, Stage::Stage2, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub cascade: CascadeConfig,
    pub schedule: Schedule,
    /// Crop length in seconds; rounded down to whole latent frames.
    pub crop_secs: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub killed_after: u32,
    pub seed: u64,
    /// Steps averaged at each end of a loss curve.
    pub smoothing_window: usize,
    /// `(fft_size, n_mels)` per mel scale.
    pub mel_scales: Vec<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cascade: CascadeConfig::default(),
            schedule: Schedule::default(),
            crop_secs: 0.5,
            batch_size: 1,
            adam: AdamConfig::default(),
            killed_after: 100,
            seed: 0,
            smoothing_window: 100,
            mel_scales: DEFAULT_SCALES.to_vec(),
        }
    }
}

impl TrainConfig {
    /// Small-budget settings for single-core runs: quarter-second crops and
    /// a learning rate raised to 3e-4 so that a 5000-step schedule converges.
    pub fn desk_scale() -> Self {
        let mut cfg = Self {
            crop_secs: 0.25,
            ..Self::default()
        };
        cfg.adam.lr = 3e-4;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade.validate()?;
        if !(self.crop_secs > 0.0) || self.batch_size == 0 || self.smoothing_window == 0 || self.mel_scales.is_empty() {
            return Err(Error::InvalidConfig(
                "crop_secs, batch_size, smoothing_window and mel_scales must be positive".into(),
            ));
        }
        if self.crop_frames() == 0 {
            return Err(Error::InvalidConfig(format!("crop of {} s is shorter than one frame", self.crop_secs)));
        }
        Ok(())
    }

    fn crop_frames(&self) -> usize {
        (self.crop_secs * self.cascade.branches[0].frame_rate()).floor() as usize
    }

    /// Crop length in low-rate samples.
    pub fn crop_low(&self) -> usize {
        self.crop_frames() * self.cascade.branches[0].hop()
    }
}

/// Training material at the high rate together with its derived low-rate
/// versions.
#[derive(Debug, Clone)]
pub struct Dataset {
    high: Vec<AudioBuffer>,
    low: Vec<AudioBuffer>,
}

impl Dataset {
    pub fn new(cascade: &Cascade, items: Vec<AudioBuffer>) -> Result<Self> {
        let rate = cascade.config.branches[1].sample_rate;
        if items.is_empty() {
            return Err(Error::NoData);
        }
        let mut high = Vec::with_capacity(items.len());
        let mut low = Vec::with_capacity(items.len());
        for x in items {
            if x.sample_rate() != rate {
                return Err(Error::RateMismatch {
                    expected: rate,
                    actual: x.sample_rate(),
                });
            }
            let l = cascade.derive_low(&x)?;
            high.push(x.slice(0, l.len() * cascade.config.factor())?);
            low.push(l);
        }
        Ok(Self { high, low })
    }

    pub fn len(&self) -> usize {
        self.high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty()
    }

    pub fn total_secs(&self) -> f64 {
        self.high.iter().map(AudioBuffer::duration_secs).sum()
    }

    /// Aligned random crops: `crop_low` low-rate samples and the matching
    /// `factor * crop_low` high-rate samples.
    fn sample(&self, rng: &mut ChaCha8Rng, batch: usize, crop_low: usize, factor: usize) -> Result<Batch> {
        let eligible: Vec<usize> = (0..self.low.len()).filter(|&i| self.low[i].len() >= crop_low).collect();
        if eligible.is_empty() {
            return Err(Error::NoData);
        }
        let mut out = Batch::default();
        for _ in 0..batch {
            let i = eligible[rng.gen_range(0..eligible.len())];
            let start = rng.gen_range(0..=self.low[i].len() - crop_low);
            out.low.push(self.low[i].samples()[start..start + crop_low].to_vec());
            let hs = start * factor;
            out.high.push(self.high[i].samples()[hs..hs + crop_low * factor].to_vec());
        }
        Ok(out)
    }
}

#[derive(Debug, Default)]
struct Batch {
    low: Vec<Vec<f64>>,
    high: Vec<Vec<f64>>,
}

/// Progress notifications emitted by [`CascadeTrainer::run`].
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    StageStart {
        stage: Stage,
        steps: usize,
    },
    Step {
        stage: Stage,
        step: usize,
        total: f64,
        low: Option<LossBreakdown>,
        high: Option<LossBreakdown>,
        disc_low: Option<f64>,
        disc_high: Option<f64>,
        revived: usize,
    },
    StageEnd {
        stage: Stage,
        summary: StageSummary,
    },
}

/// Loss curve of one stage reduced to its smoothed ends.
///
/// `initial_*` is the loss of the weights the stage starts from, averaged
/// over `smoothing_window` batches with no update. `final_*` is the mean of
/// the last `smoothing_window` training steps. `head_*`, the mean of the
/// first training steps, is kept for reference; it already includes early
/// progress.
#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub steps: usize,
    pub initial_total: f64,
    pub final_total: f64,
    pub initial_mel: f64,
    pub final_mel: f64,
    pub head_total: f64,
    pub head_mel: f64,
    /// Only meaningful for stage 2: the low branch never changed.
    pub frozen_intact: bool,
}

impl StageSummary {
    fn from_curves(total: &[f64], mel: &[f64], window: usize, baseline: (f64, f64), frozen_intact: bool) -> Self {
        let head = |c: &[f64]| {
            let n = window.min(c.len()).max(1);
            c.iter().take(n).sum::<f64>() / n as f64
        };
        let tail = |c: &[f64]| {
            let n = window.min(c.len()).max(1);
            c.iter().rev().take(n).sum::<f64>() / n as f64
        };
        Self {
            steps: total.len(),
            initial_total: baseline.0,
            final_total: tail(total),
            initial_mel: baseline.1,
            final_mel: tail(mel),
            head_total: head(total),
            head_mel: head(mel),
            frozen_intact,
        }
    }

    /// Relative drop of the smoothed total, `1 - final / initial`.
    pub fn total_drop(&self) -> f64 {
        1.0 - self.final_total / self.initial_total
    }

    pub fn mel_drop(&self) -> f64 {
        1.0 - self.final_mel / self.initial_mel
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub stages: Vec<(Stage, StageSummary)>,
}

impl TrainReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageSummary> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, v)| v)
    }
}

/// Joint objective over both branches' terms: adversarial and mel terms are
/// averaged across branches, quantizer terms are summed.
pub fn finetune_terms(
    g: &mut Graph,
    low: &TermVars,
    high: &TermVars,
    w_low: &LossWeights,
    w_high: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(10);
    for (k, c_low, c_high) in finetune_coefficients(w_low, w_high) {
        terms.push((high.var(k), c_high));
        terms.push((low.var(k), c_low));
    }
    g.weighted_sum(&terms)
}

/// Mixed into the seed of the batches that measure a stage's starting loss.
const BASELINE_SEED: u64 = 0xba5e;

/// Staged trainer for a two-branch cascade.
#[derive(Debug, Clone)]
pub struct CascadeTrainer {
    cfg: TrainConfig,
    low: BranchTrainer,
    high: BranchTrainer,
    mel_low: MelLoss,
    mel_high: MelLoss,
    rng: ChaCha8Rng,
    /// Generator updates applied to the high branch so far.
    high_updates: usize,
}

impl CascadeTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let cascade = Cascade::new(cfg.cascade.clone(), cfg.seed)?;
        Self::from_cascade(cfg, cascade)
    }

    pub fn from_cascade(cfg: TrainConfig, cascade: Cascade) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.seed;
        let low = BranchTrainer::new(cascade.low, Discriminator::new(s ^ 0x10), cfg.adam, cfg.killed_after, s ^ 0x20);
        let high = BranchTrainer::new(cascade.high, Discriminator::new(s ^ 0x11), cfg.adam, cfg.killed_after, s ^ 0x21);
        Ok(Self {
            mel_low: MelLoss {
                scales: scales_from(&cfg.mel_scales, cfg.cascade.branches[0].sample_rate)?,
            },
            mel_high: MelLoss {
                scales: scales_from(&cfg.mel_scales, cfg.cascade.branches[1].sample_rate)?,
            },
            rng: ChaCha8Rng::seed_from_u64(s ^ 0x30),
            cfg,
            low,
            high,
            high_updates: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn high_updates(&self) -> usize {
        self.high_updates
    }

    /// Snapshot of the current weights.
    pub fn cascade(&self) -> Result<Cascade> {
        Cascade::from_branches(self.cfg.cascade.clone(), self.low.branch.clone(), self.high.branch.clone())
    }

    fn weights(&self) -> (LossWeights, LossWeights) {
        (self.cfg.cascade.loss_weights[0], self.cfg.cascade.loss_weights[1])
    }

    fn batch(&mut self, data: &Dataset) -> Result<Batch> {
        let crop = self.cfg.crop_low();
        data.sample(&mut self.rng, self.cfg.batch_size, crop, self.cfg.cascade.factor())
    }

    /// Low-branch output and its upsampled copy, computed without gradients.
    fn frozen_low(&self, low_rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let b = self.low.branch.params().bind(&mut g, false);
        let x = batch_constant(&mut g, low_rows)?;
        let v = self.low.branch.forward_graph(&mut g, &b, x)?;
        let len = g.shape(v.decoded)[2];
        let up = self.high_resampler()?;
        Ok(g.value(v.decoded).data().chunks_exact(len).map(|r| up.up(r)).collect())
    }

    fn high_resampler(&self) -> Result<crate::signal::Resampler> {
        crate::signal::Resampler::new(self.cfg.cascade.factor(), &self.cfg.cascade.kernel)
    }

    pub fn step_stage1(&mut self, data: &Dataset) -> Result<StepReport> {
        let b = self.batch(data)?;
        let (w, _) = self.weights();
        self.low.step(&b.low, None, &b.low, &w, &self.mel_low, Stage::Stage1.name())
    }

    pub fn step_stage2(&mut self, data: &Dataset) -> Result<StepReport> {
        let b = self.batch(data)?;
        let up = self.frozen_low(&b.low)?;
        let residual: Vec<Vec<f64>> = b
            .high
            .iter()
            .zip(&up)
            .map(|(s, u)| s.iter().zip(u).map(|(a, b)| a - b).collect())
            .collect();
        let (_, w) = self.weights();
        let r = self.high.step(&residual, Some(&up), &b.high, &w, &self.mel_high, Stage::Stage2.name())?;
        self.high_updates += 1;
        Ok(r)
    }

    /// Joint step; returns the joint total and both breakdowns.
    pub fn step_finetune(&mut self, data: &Dataset) -> Result<(f64, StepReport, StepReport)> {
        let b = self.batch(data)?;
        let (w_low, w_high) = self.weights();
        let up = std::sync::Arc::new(self.high_resampler()?);
        let mut g = Graph::new();
        let pl = self.low.branch.params().bind(&mut g, true);
        let ph = self.high.branch.params().bind(&mut g, true);
        let dl = self.low.disc.params().bind(&mut g, false);
        let dh = self.high.disc.params().bind(&mut g, false);

        let x16 = batch_constant(&mut g, &b.low)?;
        let v16 = self.low.branch.forward_graph(&mut g, &pl, x16)?;
        let t16 = generator_terms(&mut g, &self.low.disc, &dl, v16.decoded, &b.low, &self.mel_low, &v16.quant)?;

        let u = g.upsample(v16.decoded, up)?;
        let s32 = batch_constant(&mut g, &b.high)?;
        let r = g.sub(s32, u)?;
        let v32 = self.high.branch.forward_graph(&mut g, &ph, r)?;
        let fake = g.add(u, v32.decoded)?;
        let t32 = generator_terms(&mut g, &self.high.disc, &dh, fake, &b.high, &self.mel_high, &v32.quant)?;

        let stage = Stage::Finetune.name();
        let (bl, bh) = (t16.breakdown(&g, stage)?, t32.breakdown(&g, stage)?);
        let total = finetune_terms(&mut g, &t16, &t32, &w_low, &w_high)?;
        let total_v = g.value(total).item();
        let rows = |g: &Graph, v: Var| -> Vec<Vec<f64>> {
            let len = g.shape(v)[2];
            g.value(v).data().chunks_exact(len).map(<[f64]>::to_vec).collect()
        };
        let (fake16, fake32) = (rows(&g, v16.decoded), rows(&g, fake));
        g.backward(total)?;
        let rev_l = self.low.apply_generator(&pl.grads(&g), &v16.quant);
        let rev_h = self.high.apply_generator(&ph.grads(&g), &v32.quant);
        self.high_updates += 1;
        let d16 = self.low.train_discriminator(&b.low, &fake16)?;
        let d32 = self.high.train_discriminator(&b.high, &fake32)?;
        let report = |terms: LossBreakdown, w: &LossWeights, disc, revived| -> Result<StepReport> {
            Ok(StepReport {
                total: terms.total(w)?,
                terms,
                disc,
                revived,
            })
        };
        Ok((total_v, report(bl, &w_low, d16, rev_l)?, report(bh, &w_high, d32, rev_h)?))
    }

    /// Mean `(total, mel)` of the stage objective over `smoothing_window`
    /// batches at the current weights. Batches come from a generator of
    /// their own so the training stream is unaffected.
    pub fn evaluate_stage(&self, stage: Stage, data: &Dataset) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ BASELINE_SEED ^ stage as u64);
        let (w_low, w_high) = self.weights();
        let n = self.cfg.smoothing_window;
        let (mut total, mut mel) = (0.0, 0.0);
        for _ in 0..n {
            let b = data.sample(&mut rng, self.cfg.batch_size, self.cfg.crop_low(), self.cfg.cascade.factor())?;
            let low = || self.low.evaluate(&b.low, None, &b.low, &w_low, &self.mel_low, stage.name());
            let high = || -> Result<(LossBreakdown, f64)> {
                let up = self.frozen_low(&b.low)?;
                let residual: Vec<Vec<f64>> = b
                    .high
                    .iter()
                    .zip(&up)
                    .map(|(s, u)| s.iter().zip(u).map(|(a, b)| a - b).collect())
                    .collect();
                self.high.evaluate(&residual, Some(&up), &b.high, &w_high, &self.mel_high, stage.name())
            };
            let mel_of = |t: &LossBreakdown| t.mel.unwrap_or(f64::NAN);
            let (t, m) = match stage {
                Stage::Stage1 => {
                    let (l, t) = low()?;
                    (t, mel_of(&l))
                }
                Stage::Stage2 => {
                    let (h, t) = high()?;
                    (t, mel_of(&h))
                }
                Stage::Finetune => {
                    let ((l, _), (h, _)) = (low()?, high()?);
                    (finetune_loss(&l, &h, &w_low, &w_high)?, 0.5 * (mel_of(&l) + mel_of(&h)))
                }
            };
            total += t;
            mel += m;
        }
        Ok((total / n as f64, mel / n as f64))
    }

    /// Runs one stage for its configured number of steps.
    pub fn run_stage(
        &mut self,
        stage: Stage,
        data: &Dataset,
        observer: &mut dyn FnMut(&TrainEvent),
    ) -> Result<StageSummary> {
        let steps = match stage {
            Stage::Stage1 => self.cfg.schedule.stage1,
            Stage::Stage2 => self.cfg.schedule.stage2,
            Stage::Finetune => self.cfg.schedule.finetune,
        };
        info!("{stage}: {steps} steps");
        observer(&TrainEvent::StageStart { stage, steps });
        let baseline = self.evaluate_stage(stage, data)?;
        let frozen = self.low.branch.params().fingerprint();
        let mut frozen_intact = true;
        let mut totals = Vec::with_capacity(steps);
        let mut mels = Vec::with_capacity(steps);
        for step in 0..steps {
            let event = match stage {
                Stage::Stage1 => {
                    let r = self.step_stage1(data)?;
                    totals.push(r.total);
                    mels.push(r.terms.mel.unwrap_or(f64::NAN));
                    TrainEvent::Step {
                        stage,
                        step,
                        total: r.total,
                        low: Some(r.terms),
                        high: None,
                        disc_low: Some(r.disc),
                        disc_high: None,
                        revived: r.revived,
                    }
                }
                Stage::Stage2 => {
                    let r = self.step_stage2(data)?;
                    frozen_intact &= self.low.branch.params().fingerprint() == frozen;
                    totals.push(r.total);
                    mels.push(r.terms.mel.unwrap_or(f64::NAN));
                    TrainEvent::Step {
                        stage,
                        step,
                        total: r.total,
                        low: None,
                        high: Some(r.terms),
                        disc_low: None,
                        disc_high: Some(r.disc),
                        revived: r.revived,
                    }
                }
                Stage::Finetune => {
                    let (total, l, h) = self.step_finetune(data)?;
                    totals.push(total);
                    mels.push(0.5 * (l.terms.mel.unwrap_or(f64::NAN) + h.terms.mel.unwrap_or(f64::NAN)));
                    TrainEvent::Step {
                        stage,
                        step,
                        total,
                        low: Some(l.terms),
                        high: Some(h.terms),
                        disc_low: Some(l.disc),
                        disc_high: Some(h.disc),
                        revived: l.revived + h.revived,
                    }
                }
            };
            if step % 50 == 0 {
                debug!("{stage} step {step}: total {:.4}", totals[step]);
            }
            observer(&event);
        }
        let summary = StageSummary::from_curves(&totals, &mels, self.cfg.smoothing_window, baseline, frozen_intact);
        info!(
            "{stage}: total {:.4} -> {:.4}, mel {:.4} -> {:.4}",
            summary.initial_total, summary.final_total, summary.initial_mel, summary.final_mel
        );
        observer(&TrainEvent::StageEnd {
            stage,
            summary: summary.clone(),
        });
        Ok(summary)
    }

    /// All three stages in order. `on_stage_end` sees the weights at each
    /// boundary (for checkpointing).
    pub fn run(
        &mut self,
        data: &Dataset,
        observer: &mut dyn FnMut(&TrainEvent),
        on_stage_end: &mut dyn FnMut(Stage, &Cascade) -> Result<()>,
    ) -> Result<TrainReport> {
        let mut stages = Vec::with_capacity(3);
        for stage in Stage::ALL {
            let s = self.run_stage(stage, data, observer)?;
            on_stage_end(stage, &self.cascade()?)?;
            stages.push((stage, s));
        }
        Ok(TrainReport { stages })
    }
}

/// Trains a fresh cascade on `items` (high-rate signals).
pub fn train_cascade(
    items: Vec<AudioBuffer>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<(Cascade, TrainReport)> {
    let mut t = CascadeTrainer::new(cfg.clone())?;
    let data = Dataset::new(&t.cascade()?, items)?;
    let report = t.run(&data, observer, &mut |_, _| Ok(()))?;
    Ok((t.cascade()?, report))
}
