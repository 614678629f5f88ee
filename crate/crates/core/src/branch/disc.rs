use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Conv1dSpec, Graph, ParamId, ParamStore, Var};
use crate::error::Result;

const SLOPE: f64 = 0.2;

/// `(c_out, kernel, stride)` of the hidden layers; the input has one channel.
const LAYERS: [(usize, usize, usize); 4] = [(8, 15, 2), (16, 11, 4), (32, 11, 4), (32, 5, 1)];
const OUT_KERNEL: usize = 3;

/// Least-squares waveform discriminator applied at two scales: the raw
/// signal and a 2x average-pooled copy. Each scale has its own weights.
#[derive(Debug, Clone)]
pub struct Discriminator {
    params: ParamStore,
    scales: Vec<Vec<(ParamId, ParamId, Conv1dSpec)>>,
}

/// Logits and hidden activations of every scale.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub logits: Vec<Var>,
    pub features: Vec<Vec<Var>>,
}

impl Discriminator {
    pub const SCALES: usize = 2;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let scales = (0..Self::SCALES)
            .map(|s| {
                let mut c_in = 1;
                let mut layers = Vec::new();
                for (l, &(c_out, k, stride)) in LAYERS.iter().chain(&[(1, OUT_KERNEL, 1)]).enumerate() {
                    let fan = c_in * k;
                    let w = p.add_uniform(format!("disc{s}.conv{l}.w"), vec![c_out, c_in, k], fan, &mut rng);
                    let b = p.add_uniform(format!("disc{s}.conv{l}.b"), vec![c_out], fan, &mut rng);
                    layers.push((w, b, Conv1dSpec::new(stride, k / 2)));
                    c_in = c_out;
                }
                layers
            })
            .collect();
        Self { params: p, scales }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Runs every scale on `x` `[batch, 1, len]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<DiscOutput> {
        let mut logits = Vec::with_capacity(self.scales.len());
        let mut features = Vec::with_capacity(self.scales.len());
        let mut input = x;
        for (s, layers) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input)?;
            }
            let mut h = input;
            let mut feats = Vec::with_capacity(layers.len() - 1);
            for (i, &(w, bias, spec)) in layers.iter().enumerate() {
                h = g.conv1d(h, b.var(w), Some(b.var(bias)), spec)?;
                if i + 1 < layers.len() {
                    h = g.leaky_relu(h, SLOPE);
                    feats.push(h);
                }
            }
            logits.push(h);
            features.push(feats);
        }
        Ok(DiscOutput { logits, features })
    }
}
