use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::BranchConfig;
use crate::autodiff::{Bound, Conv1dSpec, ConvTransposeSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rvq::{self, Codebook, QuantizedVars, RvqResult};
use crate::signal::AudioBuffer;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(p: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: p.add_unit_gain(format!("{name}.w"), vec![c_out, c_in, k], c_in * k, rng),
            b: p.add_const(format!("{name}.b"), vec![c_out], 0.0),
        }
    }

    /// Weight laid out `[c_in, c_out, k]` for a transposed convolution. Each
    /// output sample sees `k / stride` taps per input channel.
    fn new_transposed(
        p: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k.div_ceil(stride);
        Self {
            w: p.add_unit_gain(format!("{name}.w"), vec![c_in, c_out, k], fan_in, rng),
            b: p.add_const(format!("{name}.b"), vec![c_out], 0.0),
        }
    }

    /// Multiplies the weights by `gain`.
    fn scaled(self, p: &mut ParamStore, gain: f64) -> Self {
        p.get_mut(self.w).data_mut().iter_mut().for_each(|w| *w *= gain);
        self
    }

    fn apply(&self, g: &mut Graph, b: &Bound, x: Var, spec: Conv1dSpec) -> Result<Var> {
        g.conv1d(x, b.var(self.w), Some(b.var(self.b)), spec)
    }

    fn apply_transposed(&self, g: &mut Graph, b: &Bound, x: Var, spec: ConvTransposeSpec) -> Result<Var> {
        g.conv_transpose1d(x, b.var(self.w), Some(b.var(self.b)), spec)
    }
}

/// `x + conv1x1(snake(conv_k3_dilated(snake(x))))`.
#[derive(Debug, Clone, Copy)]
struct ResUnit {
    alpha1: ParamId,
    conv1: Conv,
    alpha2: ParamId,
    conv2: Conv,
    dilation: usize,
}

impl ResUnit {
    fn new(p: &mut ParamStore, name: &str, ch: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            alpha1: p.add_const(format!("{name}.alpha1"), vec![ch], 1.0),
            conv1: Conv::new(p, &format!("{name}.conv1"), ch, ch, 3, rng),
            alpha2: p.add_const(format!("{name}.alpha2"), vec![ch], 1.0),
            conv2: Conv::new(p, &format!("{name}.conv2"), ch, ch, 1, rng).scaled(p, RES_GAIN),
            dilation,
        }
    }

    fn apply(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = g.snake(x, b.var(self.alpha1))?;
        let h = self.conv1.apply(g, b, h, Conv1dSpec::new(1, self.dilation).dilated(self.dilation))?;
        let h = g.snake(h, b.var(self.alpha2))?;
        let h = self.conv2.apply(g, b, h, Conv1dSpec::new(1, 0))?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct Block {
    res: Vec<ResUnit>,
    alpha: ParamId,
    conv: Conv,
    stride: usize,
}

fn down_spec(stride: usize) -> Conv1dSpec {
    Conv1dSpec::new(stride, stride.div_ceil(2))
}

fn up_spec(stride: usize) -> ConvTransposeSpec {
    ConvTransposeSpec {
        stride,
        padding: stride.div_ceil(2),
        output_padding: stride % 2,
    }
}

const DILATIONS: [usize; 3] = [1, 3, 9];

/// Initial gain of the last conv in each residual unit, so a fresh unit is
/// close to the identity and depth does not inflate activations.
const RES_GAIN: f64 = 0.1;

/// Initial gain of the decoder output conv, keeping the first outputs at
/// signal level instead of saturating the tanh.
const OUT_GAIN: f64 = 0.1;

/// Encoder, quantizer and decoder of one branch. All weights, including the
/// codebooks, live in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Branch {
    cfg: BranchConfig,
    params: ParamStore,
    enc_in: Conv,
    enc_blocks: Vec<Block>,
    enc_alpha: ParamId,
    enc_out: Conv,
    books: Vec<ParamId>,
    dec_in: Conv,
    dec_blocks: Vec<Block>,
    dec_alpha: ParamId,
    dec_out: Conv,
}

/// Graph handles produced by [`Branch::forward_graph`].
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub latent: Var,
    pub quant: QuantizedVars,
    /// `[batch, 1, len]`, cropped to the input length.
    pub decoded: Var,
}

/// Result of running a branch on one signal.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub decoded: AudioBuffer,
    pub tokens: RvqResult,
}

impl Branch {
    pub fn new(cfg: BranchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let n = cfg.encoder_strides.len();
        let w = |i| cfg.width(i);
        let units = |p: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng| -> Vec<ResUnit> {
            (0..cfg.residual_units)
                .map(|u| ResUnit::new(p, &format!("{name}.res{u}"), ch, DILATIONS[u], rng))
                .collect()
        };

        let enc_in = Conv::new(&mut p, "enc.in", w(0), 1, 7, &mut rng);
        let mut enc_blocks = Vec::with_capacity(n);
        for (i, &s) in cfg.encoder_strides.iter().enumerate() {
            let name = format!("enc.block{i}");
            let res = units(&mut p, &name, w(i), &mut rng);
            enc_blocks.push(Block {
                res,
                alpha: p.add_const(format!("{name}.alpha"), vec![w(i)], 1.0),
                conv: Conv::new(&mut p, &format!("{name}.down"), w(i + 1), w(i), 2 * s, &mut rng),
                stride: s,
            });
        }
        let enc_alpha = p.add_const("enc.out.alpha", vec![w(n)], 1.0);
        let enc_out = Conv::new(&mut p, "enc.out", cfg.latent_dim, w(n), 3, &mut rng);

        let k = cfg.codebook_size();
        let books = (0..cfg.n_quantizers)
            .map(|q| {
                let book = Codebook::random(k, cfg.latent_dim, 1.0 / k as f64, &mut rng)?;
                Ok(p.add(format!("rvq.book{q}"), book.to_tensor()))
            })
            .collect::<Result<Vec<_>>>()?;

        let dec_in = Conv::new(&mut p, "dec.in", w(n), cfg.latent_dim, 7, &mut rng);
        let mut dec_blocks = Vec::with_capacity(n);
        for (i, &s) in cfg.encoder_strides.iter().enumerate().rev() {
            let name = format!("dec.block{i}");
            let alpha = p.add_const(format!("{name}.alpha"), vec![w(i + 1)], 1.0);
            let conv = Conv::new_transposed(&mut p, &format!("{name}.up"), w(i + 1), w(i), 2 * s, s, &mut rng);
            let res = units(&mut p, &name, w(i), &mut rng);
            dec_blocks.push(Block {
                res,
                alpha,
                conv,
                stride: s,
            });
        }
        let dec_alpha = p.add_const("dec.out.alpha", vec![w(0)], 1.0);
        let dec_out = Conv::new(&mut p, "dec.out", 1, w(0), 7, &mut rng).scaled(&mut p, OUT_GAIN);

        Ok(Self {
            cfg,
            params: p,
            enc_in,
            enc_blocks,
            enc_alpha,
            enc_out,
            books,
            dec_in,
            dec_blocks,
            dec_alpha,
            dec_out,
        })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook_ids(&self) -> &[ParamId] {
        &self.books
    }

    pub fn codebooks(&self) -> Result<Vec<Codebook>> {
        self.books
            .iter()
            .map(|&id| Codebook::new(self.cfg.codebook_size(), self.cfg.latent_dim, self.params.get(id).data().to_vec()))
            .collect()
    }

    /// Zeroes the decoder output layer so the branch emits silence.
    pub fn zero_decoder_output(&mut self) {
        for id in [self.dec_out.w, self.dec_out.b] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// `[batch, 1, len]` to `[batch, latent_dim, ceil(len / hop)]`.
    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let (_, ch, len) = g.value(x).dims3()?;
        if ch != 1 {
            return Err(Error::shape(format!("branch input has {ch} channels")));
        }
        let hop = self.cfg.hop();
        let padded = len.div_ceil(hop) * hop;
        let mut h = if padded > len { g.pad_time(x, 0, padded - len)? } else { x };
        h = self.enc_in.apply(g, b, h, Conv1dSpec::new(1, 3))?;
        for blk in &self.enc_blocks {
            for r in &blk.res {
                h = r.apply(g, b, h)?;
            }
            h = g.snake(h, b.var(blk.alpha))?;
            h = blk.conv.apply(g, b, h, down_spec(blk.stride))?;
        }
        h = g.snake(h, b.var(self.enc_alpha))?;
        self.enc_out.apply(g, b, h, Conv1dSpec::new(1, 1))
    }

    /// `[batch, latent_dim, frames]` to `[batch, 1, frames * hop]`.
    pub fn decode_graph(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
        let mut h = self.dec_in.apply(g, b, z, Conv1dSpec::new(1, 3))?;
        for blk in &self.dec_blocks {
            h = g.snake(h, b.var(blk.alpha))?;
            h = blk.conv.apply_transposed(g, b, h, up_spec(blk.stride))?;
            for r in &blk.res {
                h = r.apply(g, b, h)?;
            }
        }
        h = g.snake(h, b.var(self.dec_alpha))?;
        h = self.dec_out.apply(g, b, h, Conv1dSpec::new(1, 3))?;
        Ok(g.tanh(h))
    }

    /// Full encode, quantize and decode in `g`. `x` is `[batch, 1, len]`.
    pub fn forward_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<BranchVars> {
        let len = g.shape(x)[2];
        let latent = self.encode_graph(g, b, x)?;
        let books: Vec<Var> = self.books.iter().map(|&id| b.var(id)).collect();
        let quant = rvq::quantize(g, latent, &books)?;
        let y = self.decode_graph(g, b, quant.quantized)?;
        let decoded = if g.shape(y)[2] > len { g.crop_time(y, 0, len)? } else { y };
        Ok(BranchVars { latent, quant, decoded })
    }

    fn check_input(&self, x: &AudioBuffer) -> Result<()> {
        if x.sample_rate() != self.cfg.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.cfg.sample_rate,
                actual: x.sample_rate(),
            });
        }
        if x.len() < self.cfg.hop() {
            return Err(Error::SignalTooShort {
                needed: self.cfg.hop(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn input(g: &mut Graph, x: &AudioBuffer) -> Result<Var> {
        Ok(g.constant(Tensor::new(vec![1, 1, x.len()], x.samples().to_vec())?))
    }

    /// Inference pass; the decoded signal has the input's length.
    pub fn forward(&self, x: &AudioBuffer) -> Result<BranchOutput> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let xv = Self::input(&mut g, x)?;
        let vars = self.forward_graph(&mut g, &b, xv)?;
        Ok(BranchOutput {
            decoded: AudioBuffer::new(g.value(vars.decoded).data().to_vec(), self.cfg.sample_rate)?,
            tokens: rvq::rvq_encode(g.value(vars.latent), &self.codebooks()?)?,
        })
    }

    /// Token matrix `n_quantizers x ceil(len / hop)`.
    pub fn encode(&self, x: &AudioBuffer) -> Result<Vec<Vec<usize>>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let xv = Self::input(&mut g, x)?;
        let z = self.encode_graph(&mut g, &b, xv)?;
        Ok(rvq::rvq_encode(g.value(z), &self.codebooks()?)?.tokens)
    }

    /// Decodes tokens to `frames * hop` samples.
    pub fn decode(&self, tokens: &[Vec<usize>]) -> Result<AudioBuffer> {
        let z = rvq::rvq_decode(tokens, &self.codebooks()?, 1)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let zv = g.constant(z);
        let y = self.decode_graph(&mut g, &b, zv)?;
        AudioBuffer::new(g.value(y).data().to_vec(), self.cfg.sample_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(rate: u32, strides: Vec<usize>) -> BranchConfig {
        BranchConfig {
            sample_rate: rate,
            encoder_strides: strides,
            base_channels: 4,
            max_channels: 8,
            latent_dim: 6,
            n_quantizers: 2,
            codebook_bits: 3,
            residual_units: 1,
        }
    }

    fn tone(len: usize, rate: u32) -> AudioBuffer {
        AudioBuffer::new((0..len).map(|i| 0.5 * (i as f64 * 0.07).sin()).collect(), rate).unwrap()
    }

    #[test]
    fn shapes_at_defaults() {
        let b = Branch::new(BranchConfig::default_16k(), 0).unwrap();
        let out = b.forward(&tone(16_000, 16_000)).unwrap();
        assert_eq!(out.decoded.len(), 16_000);
        assert_eq!(out.tokens.tokens.len(), 4);
        assert!(out.tokens.tokens.iter().all(|t| t.len() == 50));
    }

    #[test]
    fn ragged_length_is_padded_then_cropped() {
        let b = Branch::new(tiny(8000, vec![2, 5]), 1).unwrap();
        let out = b.forward(&tone(95, 8000)).unwrap();
        assert_eq!(out.decoded.len(), 95);
        assert_eq!(out.tokens.tokens[0].len(), 10);
        let toks = b.encode(&tone(95, 8000)).unwrap();
        assert_eq!(toks, out.tokens.tokens);
        assert_eq!(b.decode(&toks).unwrap().len(), 100);
    }

    #[test]
    fn decode_of_encode_matches_forward() {
        let b = Branch::new(tiny(6000, vec![2, 3]), 2).unwrap();
        let x = tone(60, 6000);
        let out = b.forward(&x).unwrap();
        let y = b.decode(&b.encode(&x).unwrap()).unwrap();
        assert_eq!(y.samples(), out.decoded.samples());
    }

    #[test]
    fn input_errors() {
        let b = Branch::new(tiny(8000, vec![2, 5]), 1).unwrap();
        assert!(matches!(b.forward(&tone(100, 16_000)), Err(Error::RateMismatch { .. })));
        assert!(matches!(b.forward(&tone(9, 8000)), Err(Error::SignalTooShort { needed: 10, actual: 9 })));
    }

    #[test]
    fn zeroed_decoder_is_silent() {
        let mut b = Branch::new(tiny(8000, vec![2, 5]), 1).unwrap();
        b.zero_decoder_output();
        let out = b.forward(&tone(100, 8000)).unwrap();
        assert!(out.decoded.samples().iter().all(|&v| v == 0.0));
    }
}
