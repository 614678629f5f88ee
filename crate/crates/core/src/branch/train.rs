use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{branch_coefficients, Branch, Discriminator, LossBreakdown, LossWeights, TERMS};
use crate::autodiff::{Adam, AdamConfig, Bound, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rvq::{DeadEntryReviver, QuantizedVars};
use crate::signal::AudioBuffer;
use crate::spectral::{LossKind, LossValue, MelLoss};

/// Stacks equal-length rows into a `[batch, 1, len]` constant.
pub(crate) fn batch_constant(g: &mut Graph, rows: &[Vec<f64>]) -> Result<Var> {
    let len = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::shape("batch rows differ in length"));
    }
    let t = Tensor::new(vec![rows.len(), 1, len], rows.concat())?;
    Ok(g.constant(t))
}

/// The five branch terms as graph scalars.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub gen: Var,
    pub fm: Var,
    pub mel: Var,
    pub cb: Var,
    pub cmt: Var,
}

impl TermVars {
    pub fn var(&self, kind: LossKind) -> Var {
        match kind {
            LossKind::Gen => self.gen,
            LossKind::Fm => self.fm,
            LossKind::Mel => self.mel,
            LossKind::Cb => self.cb,
            LossKind::Cmt => self.cmt,
            LossKind::Stft | LossKind::Waveform => unreachable!("not a training term"),
        }
    }

    /// Forward values; fails on the first non-finite term.
    pub fn breakdown(&self, g: &Graph, stage: &str) -> Result<LossBreakdown> {
        let mut b = LossBreakdown::default();
        for k in TERMS {
            let v = g.value(self.var(k)).item();
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: stage.to_owned(),
                    term: k.name().to_owned(),
                });
            }
            b.set(k, v);
        }
        Ok(b)
    }

    /// `sum_l w_l * L_l` as a graph scalar.
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Result<Var> {
        let terms: Vec<(Var, f64)> = branch_coefficients(w).iter().map(|&(k, c)| (self.var(k), c)).collect();
        g.weighted_sum(&terms)
    }
}

/// Generator-side adversarial terms: `gen` is the mean over scales of
/// `mean((D(fake) - 1)^2)` and `fm` the mean over scales and layers of the
/// L1 distance between fake and (detached) real activations.
pub fn generator_adversarial(g: &mut Graph, disc: &Discriminator, db: &Bound, real: Var, fake: Var) -> Result<(Var, Var)> {
    let r = disc.forward(g, db, real)?;
    let f = disc.forward(g, db, fake)?;
    let scales = f.logits.len() as f64;
    let mut gen_terms = Vec::new();
    for &l in &f.logits {
        gen_terms.push((g.mse_to(l, 1.0), 1.0 / scales));
    }
    let mut fm_terms = Vec::new();
    for (fr, ff) in r.features.iter().zip(&f.features) {
        for (&a, &b) in fr.iter().zip(ff) {
            let a = g.detach(a);
            fm_terms.push(g.l1(b, a)?);
        }
    }
    let n = fm_terms.len() as f64;
    let fm_terms: Vec<(Var, f64)> = fm_terms.into_iter().map(|v| (v, 1.0 / n)).collect();
    Ok((g.weighted_sum(&gen_terms)?, g.weighted_sum(&fm_terms)?))
}

/// `mean over scales of mean((D(real) - 1)^2) + mean(D(fake)^2)`.
pub fn discriminator_loss(g: &mut Graph, disc: &Discriminator, db: &Bound, real: Var, fake: Var) -> Result<Var> {
    let r = disc.forward(g, db, real)?;
    let f = disc.forward(g, db, fake)?;
    let scales = r.logits.len() as f64;
    let mut terms = Vec::new();
    for (&lr, &lf) in r.logits.iter().zip(&f.logits) {
        terms.push((g.mse_to(lr, 1.0), 1.0 / scales));
        terms.push((g.mse_to(lf, 0.0), 1.0 / scales));
    }
    g.weighted_sum(&terms)
}

/// All five branch terms for a generator output `fake` `[batch, 1, len]`
/// against fixed `real` rows.
pub fn generator_terms(
    g: &mut Graph,
    disc: &Discriminator,
    db: &Bound,
    fake: Var,
    real: &[Vec<f64>],
    mel: &MelLoss,
    quant: &QuantizedVars,
) -> Result<TermVars> {
    let real_v = batch_constant(g, real)?;
    let (gen, fm) = generator_adversarial(g, disc, db, real_v, fake)?;
    let refs: Vec<&[f64]> = real.iter().map(Vec::as_slice).collect();
    let mel = g.signal_loss(fake, &refs, mel)?;
    Ok(TermVars {
        gen,
        fm,
        mel,
        cb: quant.cb,
        cmt: quant.cmt,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AdversarialLosses {
    pub gen: LossValue,
    pub fm: LossValue,
    pub disc: f64,
}

/// Adversarial terms of one (real, fake) pair under a fixed discriminator.
pub fn adversarial_losses(real: &AudioBuffer, fake: &AudioBuffer, disc: &Discriminator) -> Result<AdversarialLosses> {
    real.check_compatible(fake)?;
    let mut g = Graph::new();
    let db = disc.params().bind(&mut g, false);
    let r = batch_constant(&mut g, &[real.samples().to_vec()])?;
    let f = batch_constant(&mut g, &[fake.samples().to_vec()])?;
    let (gen, fm) = generator_adversarial(&mut g, disc, &db, r, f)?;
    let d = discriminator_loss(&mut g, disc, &db, r, f)?;
    Ok(AdversarialLosses {
        gen: LossValue {
            value: g.value(gen).item(),
            kind: LossKind::Gen,
        },
        fm: LossValue {
            value: g.value(fm).item(),
            kind: LossKind::Fm,
        },
        disc: g.value(d).item(),
    })
}

/// One discriminator update on detached rows; returns the loss before it.
pub fn discriminator_step(disc: &mut Discriminator, opt: &mut Adam, real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let db = disc.params().bind(&mut g, true);
    let r = batch_constant(&mut g, real)?;
    let f = batch_constant(&mut g, fake)?;
    let loss = discriminator_loss(&mut g, disc, &db, r, f)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: "discriminator".into(),
            term: "disc".into(),
        });
    }
    g.backward(loss)?;
    opt.step(disc.params_mut(), &db.grads(&g));
    Ok(v)
}

/// Per-step record of a branch update.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepReport {
    pub terms: LossBreakdown,
    pub total: f64,
    pub disc: f64,
    pub revived: usize,
}

/// A branch with its discriminator, both optimizers and the codebook
/// reviver.
#[derive(Debug, Clone)]
pub struct BranchTrainer {
    pub branch: Branch,
    pub disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    reviver: DeadEntryReviver,
    rng: ChaCha8Rng,
}

/// Residual rows kept per stage for reseeding dead codebook entries.
const REVIVAL_POOL: usize = 512;

impl BranchTrainer {
    pub fn new(branch: Branch, disc: Discriminator, adam: AdamConfig, killed_after: u32, seed: u64) -> Self {
        let cfg = branch.config();
        let reviver = DeadEntryReviver::new(cfg.n_quantizers, cfg.codebook_size(), killed_after, REVIVAL_POOL);
        Self {
            opt_g: Adam::new(branch.params(), adam),
            opt_d: Adam::new(disc.params(), adam),
            reviver,
            rng: ChaCha8Rng::seed_from_u64(seed),
            branch,
            disc,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
    }

    /// Applies generator gradients, then reseeds idle codebook entries.
    /// Returns the number of entries reseeded.
    pub fn apply_generator(&mut self, grads: &[Option<Vec<f64>>], quant: &QuantizedVars) -> usize {
        self.opt_g.step(self.branch.params_mut(), grads);
        let dim = self.branch.config().latent_dim;
        let ids = self.branch.codebook_ids().to_vec();
        let mut revived = 0;
        for (stage, &id) in ids.iter().enumerate() {
            let book = self.branch.params_mut().get_mut(id).data_mut();
            let rows = self.reviver.update(stage, &quant.tokens[stage], &quant.stage_inputs[stage], book, &mut self.rng);
            revived += rows.len();
            self.opt_g.reset_rows(id, &rows, dim);
        }
        revived
    }

    pub fn train_discriminator(&mut self, real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
        discriminator_step(&mut self.disc, &mut self.opt_d, real, fake)
    }

    /// Branch terms and weighted total for one batch without any update;
    /// arguments as in [`BranchTrainer::step`].
    pub fn evaluate(
        &self,
        input: &[Vec<f64>],
        base: Option<&[Vec<f64>]>,
        target: &[Vec<f64>],
        weights: &LossWeights,
        mel: &MelLoss,
        stage: &str,
    ) -> Result<(LossBreakdown, f64)> {
        let mut g = Graph::new();
        let pb = self.branch.params().bind(&mut g, false);
        let db = self.disc.params().bind(&mut g, false);
        let x = batch_constant(&mut g, input)?;
        let vars = self.branch.forward_graph(&mut g, &pb, x)?;
        let fake = match base {
            Some(rows) => {
                let b = batch_constant(&mut g, rows)?;
                g.add(b, vars.decoded)?
            }
            None => vars.decoded,
        };
        let terms = generator_terms(&mut g, &self.disc, &db, fake, target, mel, &vars.quant)?;
        let breakdown = terms.breakdown(&g, stage)?;
        let total = terms.total(&mut g, weights)?;
        Ok((breakdown, g.value(total).item()))
    }

    /// One generator and one discriminator update. The branch codes `input`;
    /// its output, plus the fixed `base` rows when given, is judged against
    /// `target`.
    pub fn step(
        &mut self,
        input: &[Vec<f64>],
        base: Option<&[Vec<f64>]>,
        target: &[Vec<f64>],
        weights: &LossWeights,
        mel: &MelLoss,
        stage: &str,
    ) -> Result<StepReport> {
        let mut g = Graph::new();
        let pb = self.branch.params().bind(&mut g, true);
        let db = self.disc.params().bind(&mut g, false);
        let x = batch_constant(&mut g, input)?;
        let vars = self.branch.forward_graph(&mut g, &pb, x)?;
        let fake = match base {
            Some(rows) => {
                let b = batch_constant(&mut g, rows)?;
                g.add(b, vars.decoded)?
            }
            None => vars.decoded,
        };
        let terms = generator_terms(&mut g, &self.disc, &db, fake, target, mel, &vars.quant)?;
        let breakdown = terms.breakdown(&g, stage)?;
        let total = terms.total(&mut g, weights)?;
        let total_v = g.value(total).item();
        let len = g.shape(fake)[2];
        let fake_rows: Vec<Vec<f64>> = g.value(fake).data().chunks_exact(len).map(<[f64]>::to_vec).collect();
        g.backward(total)?;
        let revived = self.apply_generator(&pb.grads(&g), &vars.quant);
        let disc = self.train_discriminator(target, &fake_rows)?;
        Ok(StepReport {
            terms: breakdown,
            total: total_v,
            disc,
            revived,
        })
    }
}
