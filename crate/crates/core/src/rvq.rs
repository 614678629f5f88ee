//! Residual vector quantization.
//!
//! Latents are `[batch, dim, frames]`; token streams are per stage and
//! batch-major (`batch * frames` entries).

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::spectral::{LossKind, LossValue};

/// One stage's table of `k` vectors of length `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    entries: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, entries: Vec<f64>) -> Result<Self> {
        if k < 2 || !k.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("codebook size {k} is not 2^bits with bits >= 1")));
        }
        if dim == 0 || entries.len() != k * dim {
            return Err(Error::shape(format!("codebook {k}x{dim} given {} values", entries.len())));
        }
        if let Some(v) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(format!("codebook entry {v}")));
        }
        Ok(Self { k, dim, entries })
    }

    /// Entries drawn uniformly from `[-scale, scale]`; distinct with
    /// probability one.
    pub fn random(k: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let entries = (0..k * dim).map(|_| rng.gen_range(-scale..scale)).collect();
        Self::new(k, dim, entries)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> u32 {
        self.k.trailing_zeros()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.k, self.dim], self.entries.clone()).expect("validated shape")
    }

    pub fn nearest(&self, v: &[f64]) -> usize {
        nearest(&self.entries, self.dim, v)
    }
}

/// Index of the row of `table` closest to `v` in squared Euclidean distance;
/// ties go to the lowest index.
pub fn nearest(table: &[f64], dim: usize, v: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, row) in table.chunks_exact(dim).enumerate() {
        let d: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// `[batch, dim, frames]` to row-major `[batch * frames, dim]`.
pub fn frames_to_rows(data: &[f64], batch: usize, dim: usize, frames: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for n in 0..batch {
        for d in 0..dim {
            for f in 0..frames {
                out[(n * frames + f) * dim + d] = data[(n * dim + d) * frames + f];
            }
        }
    }
    out
}

/// Inverse of [`frames_to_rows`].
pub fn rows_to_frames(rows: &[f64], batch: usize, dim: usize, frames: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for n in 0..batch {
        for d in 0..dim {
            for f in 0..frames {
                out[(n * dim + d) * frames + f] = rows[(n * frames + f) * dim + d];
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RvqResult {
    /// `tokens[stage][batch * frames]`.
    pub tokens: Vec<Vec<usize>>,
    pub quantized: Tensor,
    /// Energy of the residual left after each stage.
    pub residual_energy: Vec<f64>,
    pub cb_loss: LossValue,
    pub cmt_loss: LossValue,
}

fn check_books(books: &[Codebook], dim: usize) -> Result<()> {
    if books.is_empty() {
        return Err(Error::InvalidConfig("no codebooks".into()));
    }
    if let Some(b) = books.iter().find(|b| b.dim != dim) {
        return Err(Error::shape(format!("codebook dim {} vs latent dim {dim}", b.dim)));
    }
    Ok(())
}

/// Greedy stage-wise quantization of `latent` `[batch, dim, frames]`.
/// Loss values are per-element means summed over stages.
pub fn rvq_encode(latent: &Tensor, books: &[Codebook]) -> Result<RvqResult> {
    let (batch, dim, frames) = latent.dims3()?;
    check_books(books, dim)?;
    let mut residual = frames_to_rows(latent.data(), batch, dim, frames);
    let mut quantized = vec![0.0; residual.len()];
    let n = residual.len() as f64;
    let mut tokens = Vec::with_capacity(books.len());
    let mut energy = Vec::with_capacity(books.len());
    let mut loss = 0.0;
    for book in books {
        let mut stage = Vec::with_capacity(batch * frames);
        let mut se = 0.0;
        for (r, q) in residual.chunks_exact_mut(dim).zip(quantized.chunks_exact_mut(dim)) {
            let t = book.nearest(r);
            for ((rv, qv), &e) in r.iter_mut().zip(q.iter_mut()).zip(book.entry(t)) {
                *rv -= e;
                *qv += e;
                se += *rv * *rv;
            }
            stage.push(t);
        }
        loss += se / n;
        energy.push(se);
        tokens.push(stage);
    }
    Ok(RvqResult {
        tokens,
        quantized: Tensor::new(vec![batch, dim, frames], rows_to_frames(&quantized, batch, dim, frames))?,
        residual_energy: energy,
        cb_loss: LossValue {
            value: loss,
            kind: LossKind::Cb,
        },
        cmt_loss: LossValue {
            value: loss,
            kind: LossKind::Cmt,
        },
    })
}

/// Sum of the indexed entries; the result is `[batch, dim, frames]`.
pub fn rvq_decode(tokens: &[Vec<usize>], books: &[Codebook], batch: usize) -> Result<Tensor> {
    if tokens.len() != books.len() {
        return Err(Error::shape(format!("{} token stages for {} codebooks", tokens.len(), books.len())));
    }
    let dim = books.first().ok_or_else(|| Error::InvalidConfig("no codebooks".into()))?.dim;
    check_books(books, dim)?;
    let count = tokens[0].len();
    if batch == 0 || count == 0 || count % batch != 0 || tokens.iter().any(|t| t.len() != count) {
        return Err(Error::shape("token stages have inconsistent lengths"));
    }
    let mut rows = vec![0.0; count * dim];
    for (stage, (ts, book)) in tokens.iter().zip(books).enumerate() {
        for (q, &t) in rows.chunks_exact_mut(dim).zip(ts) {
            if t >= book.k {
                return Err(Error::InvalidToken {
                    stage,
                    token: t,
                    size: book.k,
                });
            }
            q.iter_mut().zip(book.entry(t)).for_each(|(a, b)| *a += b);
        }
    }
    let frames = count / batch;
    Tensor::new(vec![batch, dim, frames], rows_to_frames(&rows, batch, dim, frames))
}

/// Graph-side quantizer output.
#[derive(Debug, Clone)]
pub struct QuantizedVars {
    /// Quantized latent with a straight-through gradient to the input.
    pub quantized: Var,
    pub cb: Var,
    pub cmt: Var,
    pub tokens: Vec<Vec<usize>>,
    /// Residual entering each stage, as `[batch * frames, dim]` rows.
    pub stage_inputs: Vec<Vec<f64>>,
}

/// Quantizes `latent` in the graph. `books` are `[k, dim]` tables; the
/// codebook term pulls entries toward detached residuals and the commitment
/// term pulls residuals toward detached entries.
pub fn quantize(g: &mut Graph, latent: Var, books: &[Var]) -> Result<QuantizedVars> {
    let (batch, dim, frames) = g.value(latent).dims3()?;
    if books.is_empty() {
        return Err(Error::InvalidConfig("no codebooks".into()));
    }
    let mut residual = latent;
    let mut q_rows = vec![0.0; batch * frames * dim];
    let mut cb_terms = Vec::with_capacity(books.len());
    let mut cmt_terms = Vec::with_capacity(books.len());
    let mut tokens = Vec::with_capacity(books.len());
    let mut stage_inputs = Vec::with_capacity(books.len());
    for &book in books {
        let bdim = g.shape(book).get(1).copied().unwrap_or(0);
        if g.shape(book).len() != 2 || bdim != dim {
            return Err(Error::shape(format!("codebook {:?} vs latent dim {dim}", g.shape(book))));
        }
        let rows = frames_to_rows(g.value(residual).data(), batch, dim, frames);
        let table = g.value(book).data();
        let stage: Vec<usize> = rows.chunks_exact(dim).map(|r| nearest(table, dim, r)).collect();
        for (q, &t) in q_rows.chunks_exact_mut(dim).zip(&stage) {
            q.iter_mut().zip(&table[t * dim..(t + 1) * dim]).for_each(|(a, b)| *a += b);
        }
        let e = g.gather_rows(book, &stage, batch)?;
        let r_sg = g.detach(residual);
        let e_sg = g.detach(e);
        cb_terms.push((g.mse(r_sg, e)?, 1.0));
        cmt_terms.push((g.mse(residual, e_sg)?, 1.0));
        residual = g.sub(residual, e_sg)?;
        tokens.push(stage);
        stage_inputs.push(rows);
    }
    let quantized = g.straight_through(latent, rows_to_frames(&q_rows, batch, dim, frames))?;
    Ok(QuantizedVars {
        quantized,
        cb: g.weighted_sum(&cb_terms)?,
        cmt: g.weighted_sum(&cmt_terms)?,
        tokens,
        stage_inputs,
    })
}

/// Reseeds codebook entries that go unused for `killed_after` consecutive
/// updates with recent encoder residuals.
#[derive(Debug, Clone)]
pub struct DeadEntryReviver {
    killed_after: u32,
    capacity: usize,
    idle: Vec<Vec<u32>>,
    recent: Vec<VecDeque<Vec<f64>>>,
}

impl DeadEntryReviver {
    pub fn new(stages: usize, k: usize, killed_after: u32, capacity: usize) -> Self {
        Self {
            killed_after,
            capacity: capacity.max(1),
            idle: vec![vec![0; k]; stages],
            recent: vec![VecDeque::new(); stages],
        }
    }

    pub fn idle_steps(&self, stage: usize) -> &[u32] {
        &self.idle[stage]
    }

    /// Records one step of `stage`: `tokens` chosen for the `rows` residuals.
    /// Entries idle for `killed_after` steps are overwritten in `book` and
    /// their indices returned.
    pub fn update(
        &mut self,
        stage: usize,
        tokens: &[usize],
        rows: &[f64],
        book: &mut [f64],
        rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        let dim = rows.len() / tokens.len().max(1);
        let ring = &mut self.recent[stage];
        for r in rows.chunks_exact(dim) {
            if ring.len() == self.capacity {
                ring.pop_front();
            }
            ring.push_back(r.to_vec());
        }
        let idle = &mut self.idle[stage];
        idle.iter_mut().for_each(|c| *c += 1);
        for &t in tokens {
            idle[t] = 0;
        }
        let mut revived = Vec::new();
        for (i, c) in idle.iter_mut().enumerate() {
            if *c >= self.killed_after {
                let src = ring.make_contiguous().choose(rng).expect("ring has at least one row");
                book[i * dim..(i + 1) * dim].copy_from_slice(src);
                *c = 0;
                revived.push(i);
            }
        }
        revived
    }
}
