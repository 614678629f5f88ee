//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria can be restricted with `SDC_ACCEPTANCE=1,2,9`; unselected ones
//! print SKIP. Criterion 8 reuses the model trained by criterion 7 and is
//! skipped when 7 does not run.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdc::autodiff::{numeric_grad, relative_error, Conv1dSpec, ConvTransposeSpec, Graph, Tensor, Var};
use sdc::branch::{finetune_coefficients, finetune_loss, Branch, BranchConfig, LossBreakdown, LossWeights, TERMS};
use sdc::cascade::{
    band_energy_fraction, cascade_forward, Cascade, CascadeConfig, CascadeTrainer, Dataset, IdentityCodec, Stage,
    TrainConfig, ZeroCodec,
};
use sdc::cli::{cmd_decode, cmd_encode, cmd_inpaint, DecodeBand};
use sdc::metrics::{band_filter, band_sdr, sdr, si_sdr, BandSpec};
use sdc::bitstream::{BranchTokens, TokenStream};
use sdc::rvq::{frames_to_rows, quantize, rvq_decode, rvq_encode, Codebook};
use sdc::signal::{write_wav, Resampler, SincKernel, WavFormat};
use sdc::spectral::{scales_from, MelLoss, SignalLoss, StftLoss, WaveformLoss};
use sdc::synth::{corpus, SynthConfig};
use sdc::{AudioBuffer, Error, Result};

/// Outcome of one criterion: pass flag and a one-line detail.
struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let s: f64 = reference.iter().map(|v| v * v).sum();
    let e: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (s / e).log10()
}

fn sine(freq: f64, rate: f64, len: usize) -> Vec<f64> {
    (0..len).map(|n| (std::f64::consts::TAU * freq * n as f64 / rate).sin()).collect()
}

fn criterion_1() -> Result<Check> {
    let up = Resampler::new(2, &SincKernel::default())?;
    let margin = 512;

    let x = sine(1000.0, 16_000.0, 16_000);
    let y = up.up(&x);
    let reference = sine(1000.0, 32_000.0, y.len());
    let m = y.len() - margin;
    let sine_snr = snr_db(&reference[margin..m], &y[margin..m]);

    let white = AudioBuffer::new(rand_vec(&mut ChaCha8Rng::seed_from_u64(1), 16_000), 16_000)?;
    let noise = band_filter(&white, BandSpec::new(0.0, 7000.0)?)?.into_samples();
    let back = up.down(&up.up(&noise));
    let m = noise.len() - margin / 2;
    let round_trip_snr = snr_db(&noise[margin / 2..m], &back[margin / 2..m]);

    let tone = sine(10_000.0, 32_000.0, 32_000);
    let low = up.down(&tone);
    let m = low.len() - margin / 2;
    let mean_sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
    let suppression = -10.0 * (mean_sq(&low[margin / 2..m]) / mean_sq(&tone)).log10();

    Ok(Check::new(
        sine_snr >= 60.0 && round_trip_snr >= 60.0 && suppression >= 60.0,
        format!("1 kHz up {sine_snr:.1} dB, D∘U noise {round_trip_snr:.1} dB, 10 kHz through D -{suppression:.1} dB"),
    ))
}

fn criterion_2() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let reference = AudioBuffer::new(rand_vec(&mut rng, 32_000), 32_000)?;
    let half = sdr(&reference, &reference.scale(0.5))?;
    let zero = sdr(&reference, &AudioBuffer::zeros(32_000, 32_000))?;

    let noisy = reference.add(&AudioBuffer::new(rand_vec(&mut rng, 32_000), 32_000)?.scale(0.3))?;
    let si: Vec<f64> = [0.1, 1.0, 10.0]
        .iter()
        .map(|&c| si_sdr(&reference, &noisy.scale(c)))
        .collect::<Result<_>>()?;
    let si_spread = si.iter().fold(0.0f64, |m, v| m.max((v - si[1]).abs()));

    let error = noisy.sub(&reference)?;
    let explained: f64 = [BandSpec::LOW, BandSpec::HIGH]
        .iter()
        .map(|&b| -> Result<f64> {
            let e_ref = band_filter(&reference, b)?.energy();
            Ok(e_ref * 10f64.powf(-band_sdr(&reference, &noisy, b)? / 10.0))
        })
        .sum::<Result<f64>>()?;
    let identity = (explained / error.energy() - 1.0).abs();

    Ok(Check::new(
        (half - 6.0206).abs() <= 1e-3 && zero.abs() <= 1e-9 && si_spread <= 1e-9 && identity <= 0.01,
        format!(
            "sdr(x, x/2) {half:.5} dB, sdr(x, 0) {zero:.1e} dB, si-sdr spread {si_spread:.1e} dB, band identity {:.3} %",
            100.0 * identity
        ),
    ))
}

/// Normwise error between graph and finite-difference gradients of
/// `build(inputs)`; the output is projected to a scalar with fixed weights.
fn gradient_error(inputs: &[(Vec<usize>, Vec<f64>)], seed: u64, build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let project = |g: &mut Graph, y: Var| -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let w = rand_vec(&mut ChaCha8Rng::seed_from_u64(seed), shape.iter().product());
        let w = g.constant(Tensor::new(shape, w)?);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    };
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((s, _), v)| g.constant(Tensor::new(s.clone(), v.clone()).expect("shape")))
            .collect();
        let y = build(&mut g, &vars).expect("forward");
        let p = project(&mut g, y).expect("projection");
        g.value(p).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, v)| Ok(g.leaf(Tensor::new(s.clone(), v.clone())?.with_requires_grad(true))))
        .collect::<Result<_>>()?;
    let y = build(&mut g, &vars)?;
    let p = project(&mut g, y)?;
    g.backward(p)?;
    let mut worst = 0.0f64;
    for (k, (_, x)) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = numeric_grad(x, 1e-5, |p| {
            let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
            vals[k] = p.to_vec();
            eval(&vals)
        });
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
    }
    Ok(worst)
}

/// STE gradients of a tiny encoder, quantizer and decoder against finite
/// differences of the surrogate objective in which the token assignment is
/// frozen and the quantization offset is a constant.
fn quantizer_gradient_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (dim, k, n_q, len) = (3, 8, 2, 24);
    let frames = len / 2;
    let x = rand_vec(rng, len);
    let target = rand_vec(rng, len);
    let enc_w = rand_vec(rng, dim * 4);
    let dec_w = rand_vec(rng, dim * 4);
    let books: Vec<Vec<f64>> = (0..n_q).map(|_| rand_vec(rng, k * dim)).collect();
    let enc_spec = Conv1dSpec::new(2, 1);
    let dec_spec = ConvTransposeSpec {
        stride: 2,
        padding: 1,
        output_padding: 0,
    };

    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![1, 1, len], x.clone())?);
    let tv = g.constant(Tensor::new(vec![1, 1, len], target.clone())?);
    let ew = g.leaf(Tensor::new(vec![dim, 1, 4], enc_w.clone())?.with_requires_grad(true));
    let dw = g.leaf(Tensor::new(vec![dim, 1, 4], dec_w.clone())?.with_requires_grad(true));
    let bv: Vec<Var> = books
        .iter()
        .map(|b| Ok(g.leaf(Tensor::new(vec![k, dim], b.clone())?.with_requires_grad(true))))
        .collect::<Result<_>>()?;
    let latent = g.conv1d(xv, ew, None, enc_spec)?;
    let latent0 = g.value(latent).data().to_vec();
    let q = quantize(&mut g, latent, &bv)?;
    let offset: Vec<f64> = g.value(q.quantized).data().iter().zip(&latent0).map(|(a, b)| a - b).collect();
    let y = g.conv_transpose1d(q.quantized, dw, None, dec_spec)?;
    let rec = g.mse(y, tv)?;
    let total = g.weighted_sum(&[(rec, 1.0), (q.cb, 1.0), (q.cmt, 0.25)])?;
    let value0 = g.value(total).item();
    g.backward(total)?;
    let mut analytic = g.grad(ew).expect("encoder grad").to_vec();
    analytic.extend_from_slice(g.grad(dw).expect("decoder grad"));
    for &b in &bv {
        analytic.extend_from_slice(g.grad(b).expect("codebook grad"));
    }

    // frames layout [dim, frames] of the residual entering each stage and of
    // the entry chosen there, both at the expansion point
    let to_frames = |rows: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; dim * frames];
        for f in 0..frames {
            for d in 0..dim {
                out[d * frames + f] = rows[f * dim + d];
            }
        }
        out
    };
    let stage_in: Vec<Vec<f64>> = q.stage_inputs.iter().map(|r| to_frames(r)).collect();
    let chosen: Vec<Vec<f64>> = q
        .tokens
        .iter()
        .zip(&books)
        .map(|(t, b)| to_frames(&t.iter().flat_map(|&i| b[i * dim..(i + 1) * dim].to_vec()).collect::<Vec<_>>()))
        .collect();
    let tokens = q.tokens.clone();

    let surrogate = |theta: &[f64]| -> f64 {
        let (ew_v, rest) = theta.split_at(dim * 4);
        let (dw_v, book_v) = rest.split_at(dim * 4);
        let mut g = Graph::new();
        let c = |g: &mut Graph, shape: Vec<usize>, v: Vec<f64>| g.constant(Tensor::new(shape, v).expect("shape"));
        let xv = c(&mut g, vec![1, 1, len], x.clone());
        let tv = c(&mut g, vec![1, 1, len], target.clone());
        let ew = c(&mut g, vec![dim, 1, 4], ew_v.to_vec());
        let dw = c(&mut g, vec![dim, 1, 4], dw_v.to_vec());
        let latent = g.conv1d(xv, ew, None, enc_spec).expect("conv");
        let off = c(&mut g, vec![1, dim, frames], offset.clone());
        let qs = g.add(latent, off).expect("add");
        let y = g.conv_transpose1d(qs, dw, None, dec_spec).expect("convT");
        let mut terms = vec![(g.mse(y, tv).expect("mse"), 1.0)];
        let mut prefix = vec![0.0; dim * frames];
        for s in 0..n_q {
            let book = c(&mut g, vec![k, dim], book_v[s * k * dim..(s + 1) * k * dim].to_vec());
            let e = g.gather_rows(book, &tokens[s], 1).expect("gather");
            let r0 = c(&mut g, vec![1, dim, frames], stage_in[s].clone());
            terms.push((g.mse(r0, e).expect("mse"), 1.0));
            let p = c(&mut g, vec![1, dim, frames], prefix.clone());
            let r = g.sub(latent, p).expect("sub");
            let e0 = c(&mut g, vec![1, dim, frames], chosen[s].clone());
            terms.push((g.mse(r, e0).expect("mse"), 0.25));
            prefix.iter_mut().zip(&chosen[s]).for_each(|(a, b)| *a += b);
        }
        let t = g.weighted_sum(&terms).expect("sum");
        g.value(t).item()
    };
    let mut theta = enc_w;
    theta.extend(dec_w);
    books.iter().for_each(|b| theta.extend_from_slice(b));
    if (surrogate(&theta) - value0).abs() > 1e-10 * value0.abs().max(1.0) {
        return Ok(f64::INFINITY);
    }
    let numeric = numeric_grad(&theta, 1e-5, surrogate);
    Ok(relative_error(&analytic, &numeric, 1e-8))
}

fn criterion_3() -> Result<Check> {
    const INSTANCES: u64 = 20;
    let mut worst = [0.0f64; 7];
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (batch, c_in, c_out) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (kernel, stride, len) = (rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(12..24));
        let padding = rng.gen_range(0..kernel.max(2));
        let dilation = rng.gen_range(1..3);
        let spec = Conv1dSpec::new(stride, padding).dilated(dilation);
        let inputs = [
            (vec![batch, c_in, len], rand_vec(&mut rng, batch * c_in * len)),
            (vec![c_out, c_in, kernel], rand_vec(&mut rng, c_out * c_in * kernel)),
            (vec![c_out], rand_vec(&mut rng, c_out)),
        ];
        worst[0] = worst[0].max(gradient_error(&inputs, seed, &|g, v| g.conv1d(v[0], v[1], Some(v[2]), spec))?);

        let t_stride = rng.gen_range(1..5);
        let t_kernel = rng.gen_range(t_stride..2 * t_stride + 2);
        let t_spec = ConvTransposeSpec {
            stride: t_stride,
            padding: rng.gen_range(0..=t_kernel / 2),
            output_padding: rng.gen_range(0..t_stride),
        };
        let t_len = rng.gen_range(4..10);
        let inputs = [
            (vec![batch, c_in, t_len], rand_vec(&mut rng, batch * c_in * t_len)),
            (vec![c_in, c_out, t_kernel], rand_vec(&mut rng, c_in * c_out * t_kernel)),
            (vec![c_out], rand_vec(&mut rng, c_out)),
        ];
        worst[1] = worst[1].max(gradient_error(&inputs, seed, &|g, v| {
            g.conv_transpose1d(v[0], v[1], Some(v[2]), t_spec)
        })?);

        let inputs = [
            (vec![batch, c_in, len], rand_vec(&mut rng, batch * c_in * len).iter().map(|v| 2.0 * v).collect()),
            (vec![c_in], (0..c_in).map(|_| rng.gen_range(0.3..2.0)).collect()),
        ];
        worst[2] = worst[2].max(gradient_error(&inputs, seed, &|g, v| g.snake(v[0], v[1]))?);

        let sig_len = 256;
        let scales = scales_from(&[(64, 8), (32, 4)], 16_000)?;
        let losses: [Box<dyn SignalLoss>; 3] = [
            Box::new(MelLoss { scales: scales.clone() }),
            Box::new(StftLoss { scales }),
            Box::new(WaveformLoss),
        ];
        let reference = rand_vec(&mut rng, sig_len);
        let estimate = rand_vec(&mut rng, sig_len);
        for (i, loss) in losses.iter().enumerate() {
            let mut g = Graph::new();
            let xv = g.leaf(Tensor::new(vec![1, 1, sig_len], estimate.clone())?.with_requires_grad(true));
            let l = g.signal_loss(xv, &[&reference], loss.as_ref())?;
            g.backward(l)?;
            let analytic = g.grad(xv).expect("loss grad").to_vec();
            let numeric = numeric_grad(&estimate, 1e-6, |p| loss.value(&reference, p).expect("loss"));
            worst[3 + i] = worst[3 + i].max(relative_error(&analytic, &numeric, 1e-8));
        }

        worst[6] = worst[6].max(quantizer_gradient_error(&mut rng)?);
    }
    let names = ["conv1d", "conv_transpose1d", "snake", "mel", "stft", "waveform", "rvq-ste"];
    let pass = worst[..6].iter().all(|&e| e <= 1e-4) && worst[6] <= 1e-3;
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Check::new(pass, format!("{INSTANCES} instances each, worst: {detail}")))
}

fn criterion_4() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut monotone = 0;
    let mut lossless = 0;
    for _ in 0..1000 {
        let (k, dim, n_q, frames) = (1 << rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..8));
        // every stage may leave its residual unchanged
        let books: Vec<Codebook> = (0..n_q)
            .map(|_| {
                let mut e = rand_vec(&mut rng, k * dim);
                e[..dim].iter_mut().for_each(|v| *v = 0.0);
                Codebook::new(k, dim, e)
            })
            .collect::<Result<_>>()?;
        let latent = Tensor::new(vec![1, dim, frames], rand_vec(&mut rng, dim * frames).iter().map(|v| 2.0 * v).collect())?;
        let r = rvq_encode(&latent, &books)?;
        // summed in the encoder's frame-major order so equal energies compare equal
        let rows = frames_to_rows(latent.data(), 1, dim, frames);
        let mut energies = vec![rows.iter().map(|v| v * v).sum::<f64>()];
        energies.extend(&r.residual_energy);
        monotone += energies.windows(2).all(|w| w[1] <= w[0]) as usize;
        let stream = TokenStream::new(50, vec![BranchTokens::new(16_000, k.trailing_zeros() as u8, r.tokens.clone())?])?;
        let parsed = TokenStream::from_bytes(&stream.to_bytes())?;
        let decoded = rvq_decode(&parsed.branches[0].tokens, &books, 1)?;
        lossless += (parsed.branches[0].tokens == r.tokens && decoded.data() == r.quantized.data()) as usize;
    }

    // exhaustive greedy oracle: among all K^2 pairs, minimize the stage-1
    // error first, then the stage-2 error, ties to the lowest index
    let mut greedy_equal = 0;
    for _ in 0..200 {
        let books: Vec<Codebook> = (0..2).map(|_| Codebook::random(8, 2, 1.0, &mut rng)).collect::<Result<_>>()?;
        let x = rand_vec(&mut rng, 2);
        let r = rvq_encode(&Tensor::new(vec![1, 2, 1], x.clone())?, &books)?;
        let err = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let mut best: Option<(f64, f64, usize, usize)> = None;
        for a in 0..8 {
            for b in 0..8 {
                let ea = books[0].entry(a);
                let eb = books[1].entry(b);
                let r1: Vec<f64> = x.iter().zip(ea).map(|(p, q)| p - q).collect();
                let r2: Vec<f64> = r1.iter().zip(eb).map(|(p, q)| p - q).collect();
                let cand = (err(&r1), err(&r2), a, b);
                if best.is_none_or(|bst| (cand.0, cand.1) < (bst.0, bst.1)) {
                    best = Some(cand);
                }
            }
        }
        let (_, _, a, b) = best.expect("nonempty");
        greedy_equal += (r.tokens == vec![vec![a], vec![b]]) as usize;
    }
    Ok(Check::new(
        monotone == 1000 && lossless == 1000 && greedy_equal == 200,
        format!("nonincreasing {monotone}/1000, round trip {lossless}/1000, greedy = brute force {greedy_equal}/200"),
    ))
}

fn criterion_5() -> Result<Check> {
    let up = Resampler::new(2, &SincKernel::default())?;
    let s32 = AudioBuffer::new(rand_vec(&mut ChaCha8Rng::seed_from_u64(5), 32_000).iter().map(|v| 0.5 * v).collect(), 32_000)?;
    let s16 = AudioBuffer::new(up.down(s32.samples()), 16_000)?;
    let oracle = cascade_forward(&s16, &s32, &IdentityCodec(16_000), &IdentityCodec(32_000), &up)?;
    let identity_snr = snr_db(s32.samples(), oracle.s_hat_32.samples());

    let low = Branch::new(BranchConfig::default_16k(), 0)?;
    let zeroed = cascade_forward(&s16, &s32, &low, &ZeroCodec(32_000), &up)?;
    let plain_up = up.up(zeroed.d_hat_16.samples());
    let zero_exact = zeroed.s_hat_32.samples() == plain_up.as_slice();

    let cascade = Cascade::new(CascadeConfig::default(), 1)?;
    let out = cascade.forward(&s32)?;
    let residue = out
        .s_hat_32
        .samples()
        .iter()
        .zip(out.up_d_hat_16.samples().iter().zip(out.d_hat_32.samples()))
        .fold(0.0f64, |m, (s, (u, d))| m.max((s - (u + d)).abs()));
    Ok(Check::new(
        identity_snr >= 60.0 && zero_exact && residue == 0.0,
        format!("identity oracles {identity_snr:.1} dB, zeroed high branch bit-exact {zero_exact}, summation residue {residue:e}"),
    ))
}

fn criterion_6() -> Result<Check> {
    let w = LossWeights::default();
    let one = LossBreakdown::uniform(1.0);
    let branch_total = one.total(&w)?;
    let joint_total = finetune_loss(&one, &one, &w, &w)?;
    // the joint objective must move by exactly coefficient * delta for a
    // perturbation of any single term of either branch
    let expected = [(0.5, 0.5), (1.0, 1.0), (7.5, 7.5), (1.0, 1.0), (0.25, 0.25)];
    let delta = 0.5;
    let mut linear = finetune_coefficients(&w, &w)
        .iter()
        .zip(expected)
        .all(|(&(_, c16, c32), (e16, e32))| c16 == e16 && c32 == e32);
    for (i, kind) in TERMS.iter().enumerate() {
        for branch in 0..2 {
            let mut b = [one, one];
            b[branch].set(*kind, 1.0 + delta);
            let d = finetune_loss(&b[0], &b[1], &w, &w)? - joint_total;
            let c = if branch == 0 { expected[i].0 } else { expected[i].1 };
            linear &= d == c * delta;
        }
    }
    Ok(Check::new(
        branch_total == 19.25 && joint_total == 20.5 && linear,
        format!("unit totals {branch_total} and {joint_total}, joint coefficients linear {linear}"),
    ))
}

struct Trained {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
    held_out: Vec<AudioBuffer>,
}

/// Correlation of per-frame log energies. A decoder that ignores its input
/// scores near zero against every clip.
fn envelope_correlation(reference: &[f64], estimate: &[f64], frame: usize) -> f64 {
    let log_energy = |v: &[f64]| -> Vec<f64> {
        v.chunks_exact(frame)
            .map(|c| (c.iter().map(|x| x * x).sum::<f64>() / frame as f64 + 1e-10).ln())
            .collect()
    };
    let (a, b) = (log_energy(reference), log_energy(estimate));
    let n = a.len().min(b.len());
    let mean = |v: &[f64]| v[..n].iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt().max(1e-300)
}

fn criterion_7(trained: &mut Option<Trained>) -> Result<Check> {
    let cfg = TrainConfig::desk_scale();
    let synth = SynthConfig::default();
    let mut trainer = CascadeTrainer::new(cfg.clone())?;
    let data = Dataset::new(&trainer.cascade()?, corpus(&synth, 0)?)?;
    let secs = data.total_secs();
    let low_before = trainer.cascade()?.low.params().fingerprint();
    let mut low_after_stage1 = None;
    let mut low_after_stage2 = None;
    let report = trainer.run(&data, &mut |_| {}, &mut |stage, c| {
        let fp = c.low.params().fingerprint();
        match stage {
            Stage::Stage1 => low_after_stage1 = Some(fp),
            Stage::Stage2 => low_after_stage2 = Some(fp),
            Stage::Finetune => {}
        }
        Ok(())
    })?;
    let cascade = trainer.cascade()?;
    let s1 = report.stage(Stage::Stage1).expect("stage 1");
    let s2 = report.stage(Stage::Stage2).expect("stage 2");
    let frozen = s2.frozen_intact && low_after_stage1 == low_after_stage2 && low_after_stage1 != Some(low_before);

    let held_out = corpus(&SynthConfig { clips: 4, ..synth }, 1000)?;
    let mut fractions = Vec::new();
    let mut tracking = Vec::new();
    for x in &held_out {
        let out = cascade.forward(x)?;
        fractions.push((
            band_energy_fraction(&out.d_hat_32, BandSpec::HIGH)?,
            band_energy_fraction(&out.d_hat_32, BandSpec::LOW)?,
        ));
        let high = band_filter(x, BandSpec::HIGH)?;
        let d32_high = band_filter(&out.d_hat_32, BandSpec::HIGH)?;
        tracking.push((
            envelope_correlation(cascade.derive_low(x)?.samples(), out.d_hat_16.samples(), 320),
            envelope_correlation(high.samples(), d32_high.samples(), 640),
        ));
    }
    let disentangled = fractions.iter().all(|(hi, lo)| hi > lo);

    let dir = tempfile::tempdir().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let ckpt = dir.path().join("ckpt");
    cascade.save(&ckpt, Some(Stage::Finetune))?;
    *trained = Some(Trained {
        _dir: dir,
        ckpt,
        held_out,
    });

    let pass = secs >= 120.0 && s1.mel_drop() >= 0.5 && s2.total_drop() >= 0.3 && frozen && disentangled;
    let fr = fractions
        .iter()
        .map(|(hi, lo)| format!("{hi:.2}/{lo:.2}"))
        .collect::<Vec<_>>()
        .join(" ");
    let tr = tracking
        .iter()
        .map(|(lo, hi)| format!("{lo:.2}/{hi:.2}"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Check::new(
        pass,
        format!(
            "{secs:.0} s audio; (a) stage-1 mel -{:.1} %; (b) stage-2 total -{:.1} %; (c) frozen {frozen}; (d) d32 high/low energy {fr}; \
             envelope tracking d16/d32-high {tr}",
            100.0 * s1.mel_drop(),
            100.0 * s2.total_drop()
        ),
    ))
}

fn criterion_8(trained: &Trained) -> Result<Check> {
    let cascade = Cascade::load(&trained.ckpt)?.0;
    let dir = tempfile::tempdir().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut worst_band = f64::INFINITY;
    let mut mel_ok = true;
    let mut detail = Vec::new();
    for (i, s32) in trained.held_out.iter().enumerate() {
        let s16 = cascade.derive_low(s32)?;
        let (in16, ref32, out) = (
            dir.path().join(format!("in{i}.wav")),
            dir.path().join(format!("ref{i}.wav")),
            dir.path().join(format!("out{i}.wav")),
        );
        write_wav(&in16, &s16, WavFormat::Float32)?;
        write_wav(&ref32, s32, WavFormat::Float32)?;
        let r = cmd_inpaint(&in16, &trained.ckpt, &out, Some(&ref32))?;
        let t = r.triple.expect("reference given");
        worst_band = worst_band.min(r.high_band_energy_db);
        mel_ok &= t.inpainted.mel <= t.up_down_inpainted.mel;
        detail.push(format!(
            "{:.1} dB, mel {:.3}/{:.3}/{:.3}",
            r.high_band_energy_db, t.up_low.mel, t.up_down_inpainted.mel, t.inpainted.mel
        ));
    }
    Ok(Check::new(
        worst_band >= -40.0 && mel_ok,
        format!("high band energy and mel U(s16)/U∘D(inp)/inp per clip: {}", detail.join("; ")),
    ))
}

fn criterion_9() -> Result<Check> {
    let lo = BranchConfig::default_16k();
    let hi = BranchConfig::default_32k();
    let arithmetic = lo.bitrate() == 2000.0 && lo.bitrate() + hi.bitrate() == 4000.0;

    let dir = tempfile::tempdir().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let p = |n: &str| dir.path().join(n);
    Cascade::new(CascadeConfig::default(), 9)?.save(p("ckpt"), None)?;
    let x = AudioBuffer::new(
        sine(440.0, 32_000.0, 32_000).iter().zip(rand_vec(&mut ChaCha8Rng::seed_from_u64(9), 32_000)).map(|(s, n)| 0.4 * s + 0.05 * n).collect(),
        32_000,
    )?;
    write_wav(p("in.wav"), &x, WavFormat::Float32)?;
    let s = cmd_encode(&p("in.wav"), &p("ckpt"), &p("a.sdc"), false)?;
    let bytes = std::fs::read(p("a.sdc")).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let sizes = s.branches.iter().all(|b| b.frame_count() == 50) && bytes.len() == 31 + 250 + 250;
    let rates = s.payload_bitrate(1) == 2000.0 && s.payload_bitrate(2) == 4000.0;

    cmd_decode(&p("a.sdc"), &p("ckpt"), &p("dec.wav"), Some(DecodeBand::Full))?;
    let reparsed = TokenStream::read(p("a.sdc"))?.to_bytes() == bytes;
    cmd_encode(&p("in.wav"), &p("ckpt"), &p("b.sdc"), false)?;
    let repeat = std::fs::read(p("b.sdc")).map_err(|e| Error::Checkpoint(e.to_string()))? == bytes;

    let mut rejected = 0;
    for (offset, value) in [(0usize, b'X'), (4, 2), (16, 0)] {
        let mut bad = bytes.clone();
        bad[offset] = value;
        std::fs::write(p("bad.sdc"), &bad).map_err(|e| Error::Checkpoint(e.to_string()))?;
        rejected += matches!(cmd_decode(&p("bad.sdc"), &p("ckpt"), &p("bad.wav"), None), Err(Error::Bitstream(_))) as usize;
    }
    Ok(Check::new(
        arithmetic && sizes && rates && reparsed && repeat && rejected == 3,
        format!(
            "2000/4000 bps {}, 1 s -> {} bytes, reparse identical {reparsed}, re-encode identical {repeat}, corrupt headers rejected {rejected}/3",
            arithmetic && rates,
            bytes.len()
        ),
    ))
}

fn selected() -> Vec<u32> {
    match std::env::var("SDC_ACCEPTANCE") {
        Ok(s) if !s.trim().is_empty() => s.split(',').filter_map(|v| v.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    }
}

fn main() -> ExitCode {
    let chosen = selected();
    let mut trained = None;
    let mut failed = 0;
    let criteria: [(u32, &str, Duration); 9] = [
        (1, "resampler fidelity", Duration::from_secs(5)),
        (2, "metric closed forms", Duration::from_secs(5)),
        (3, "gradient checks", Duration::from_secs(60)),
        (4, "rvq properties", Duration::from_secs(30)),
        (5, "cascade algebra", Duration::from_secs(10)),
        (6, "loss arithmetic", Duration::from_secs(5)),
        (7, "toy training", Duration::from_secs(30 * 60)),
        (8, "inpainting", Duration::from_secs(60)),
        (9, "bitstream", Duration::from_secs(5)),
    ];
    for (n, name, limit) in criteria {
        if !chosen.contains(&n) || (n == 8 && trained.is_none()) {
            println!("SKIP criterion {n} ({name})");
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(&mut trained),
            8 => criterion_8(trained.as_ref().expect("checked above")),
            _ => criterion_9(),
        };
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(c) => (c.pass && elapsed <= limit, c.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!(
            "{} criterion {n} ({name}): {detail} [{:.1} s, limit {} s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
