use std::sync::Arc;

use super::kernels::{gemm, Unfold};
use super::Tensor;
use crate::error::{Error, Result};
use crate::signal::Resampler;
use crate::spectral::SignalLoss;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv1dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Output length for an input of `len` samples and a `kernel`-tap filter.
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (self.stride >= 1 && padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTransposeSpec {
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let full = (len - 1) * self.stride + kernel + self.output_padding;
        (self.stride >= 1 && full > 2 * self.padding).then(|| full - 2 * self.padding)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv1dSpec,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvTransposeSpec,
    },
    /// Caches `sin^2(alpha x)` and `sin(2 alpha x)` for the backward pass.
    Snake {
        x: Var,
        alpha: Var,
        sin_sq: Vec<f64>,
        sin_2x: Vec<f64>,
    },
    Tanh(Var),
    LeakyRelu(Var, f64),
    AvgPool2(Var),
    Upsample {
        x: Var,
        resampler: Arc<Resampler>,
    },
    CropTime {
        x: Var,
        from: usize,
    },
    PadTime {
        x: Var,
        left: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    MseTo(Var, Var),
    MseToConst(Var, f64),
    L1To(Var, Var),
    StraightThrough(Var),
    Fused {
        x: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MseTo(a, b) | Op::L1To(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Tanh(x)
            | Op::LeakyRelu(x, _)
            | Op::AvgPool2(x)
            | Op::MseToConst(x, _)
            | Op::StraightThrough(x) => vec![*x],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Conv1d { x, w, b, .. } | Op::ConvTranspose1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Snake { x, alpha, .. } => vec![*x, *alpha],
            Op::Upsample { x, .. }
            | Op::CropTime { x, .. }
            | Op::PadTime { x, .. }
            | Op::Fused { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order; `backward` walks it once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

const SNAKE_EPS: f64 = 1e-9;

fn sum_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].value.requires_grad());
        value = value.with_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Adds an input tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Gradient-stopping copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// `sum_i c_i * x_i` over scalar inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if !self.value(v).is_scalar() {
                return Err(Error::NotAScalar(self.shape(v).to_vec()));
            }
            s += c * self.value(v).item();
        }
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec())))
    }

    /// Cross-correlation of `x` [batch, c_in, time] with `w` [c_out, c_in, k].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv1dSpec) -> Result<Var> {
        let (batch, c_in, len) = self.value(x).dims3()?;
        let (c_out, wc_in, kernel) = self.value(w).dims3()?;
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv1d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(format!("conv1d bias {:?}, need [{c_out}]", self.shape(b))));
            }
        }
        let t_out = spec
            .output_len(len, kernel)
            .filter(|&t| t >= 1)
            .ok_or_else(|| Error::shape(format!("conv1d: input length {len} too short for kernel {kernel}")))?;
        let unfold = Unfold {
            channels: c_in,
            len,
            kernel,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            positions: t_out,
        };
        let mut out = vec![0.0; batch * c_out * t_out];
        let xd = self.data(x);
        let wd = self.data(w);
        for n in 0..batch {
            let cols = unfold.im2col(&xd[n * c_in * len..(n + 1) * c_in * len]);
            let y = &mut out[n * c_out * t_out..(n + 1) * c_out * t_out];
            gemm(c_out, c_in * kernel, t_out, wd, false, &cols, false, 0.0, y);
            if let Some(b) = b {
                for (o, &bv) in self.data(b).iter().enumerate() {
                    y[o * t_out..(o + 1) * t_out].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let t = Tensor::new(vec![batch, c_out, t_out], out)?;
        Ok(self.push(t, Op::Conv1d { x, w, b, spec }))
    }

    /// Transposed convolution; `w` is [c_in, c_out, k]. This is the adjoint of
    /// [`Graph::conv1d`] with the same weight and geometry.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvTransposeSpec,
    ) -> Result<Var> {
        let (batch, c_in, len) = self.value(x).dims3()?;
        let (wc_in, c_out, kernel) = self.value(w).dims3()?;
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv_transpose1d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(format!("conv_transpose1d bias {:?}, need [{c_out}]", self.shape(b))));
            }
        }
        let t_out = spec
            .output_len(len, kernel)
            .ok_or_else(|| Error::shape("conv_transpose1d: empty output"))?;
        let unfold = Unfold {
            channels: c_out,
            len: t_out,
            kernel,
            stride: spec.stride,
            padding: spec.padding,
            dilation: 1,
            positions: len,
        };
        let mut out = vec![0.0; batch * c_out * t_out];
        let xd = self.data(x);
        let wd = self.data(w);
        let mut cols = vec![0.0; c_out * kernel * len];
        for n in 0..batch {
            gemm(
                c_out * kernel,
                c_in,
                len,
                wd,
                true,
                &xd[n * c_in * len..(n + 1) * c_in * len],
                false,
                0.0,
                &mut cols,
            );
            let y = &mut out[n * c_out * t_out..(n + 1) * c_out * t_out];
            unfold.col2im(&cols, y);
            if let Some(b) = b {
                for (o, &bv) in self.data(b).iter().enumerate() {
                    y[o * t_out..(o + 1) * t_out].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let t = Tensor::new(vec![batch, c_out, t_out], out)?;
        Ok(self.push(t, Op::ConvTranspose1d { x, w, b, spec }))
    }

    /// `x + sin^2(alpha x) / alpha` with one `alpha` per channel.
    pub fn snake(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        if self.shape(alpha) != [ch] {
            return Err(Error::shape(format!("snake alpha {:?}, need [{ch}]", self.shape(alpha))));
        }
        let a = self.data(alpha);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len());
        let mut sin_sq = Vec::with_capacity(xd.len());
        let mut sin_2x = Vec::with_capacity(xd.len());
        for (i, row) in xd.chunks_exact(len).enumerate() {
            let c = i % ch;
            let inv = 1.0 / (a[c] + SNAKE_EPS);
            for &v in row {
                let (s, co) = (a[c] * v).sin_cos();
                sin_sq.push(s * s);
                sin_2x.push(2.0 * s * co);
                out.push(v + inv * s * s);
            }
        }
        let t = Tensor::new(vec![batch, ch, len], out)?;
        Ok(self.push(t, Op::Snake { x, alpha, sin_sq, sin_2x }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(x, slope))
    }

    /// Mean of adjacent sample pairs along time; an odd trailing sample is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        let half = len / 2;
        if half == 0 {
            return Err(Error::shape("avg_pool2 on length < 2"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(batch * ch * half);
        for row in xd.chunks_exact(len) {
            out.extend((0..half).map(|i| 0.5 * (row[2 * i] + row[2 * i + 1])));
        }
        let t = Tensor::new(vec![batch, ch, half], out)?;
        Ok(self.push(t, Op::AvgPool2(x)))
    }

    /// Sinc upsampling of every [batch, channel] row.
    pub fn upsample(&mut self, x: Var, resampler: Arc<Resampler>) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        let f = resampler.factor();
        let mut out = Vec::with_capacity(batch * ch * len * f);
        for row in self.data(x).chunks_exact(len) {
            out.extend(resampler.up(row));
        }
        let t = Tensor::new(vec![batch, ch, len * f], out)?;
        Ok(self.push(t, Op::Upsample { x, resampler }))
    }

    /// Keeps `len` samples of every row starting at `from`.
    pub fn crop_time(&mut self, x: Var, from: usize, len: usize) -> Result<Var> {
        let (batch, ch, t_in) = self.value(x).dims3()?;
        if from + len > t_in || len == 0 {
            return Err(Error::shape(format!("crop {from}+{len} of length {t_in}")));
        }
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(t_in)
            .flat_map(|row| row[from..from + len].iter().copied())
            .collect();
        let t = Tensor::new(vec![batch, ch, len], out)?;
        Ok(self.push(t, Op::CropTime { x, from }))
    }

    /// Zero-pads every row with `left` and `right` samples.
    pub fn pad_time(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        let out_len = left + len + right;
        let mut out = vec![0.0; batch * ch * out_len];
        for (dst, src) in out.chunks_exact_mut(out_len).zip(self.data(x).chunks_exact(len)) {
            dst[left..left + len].copy_from_slice(src);
        }
        let t = Tensor::new(vec![batch, ch, out_len], out)?;
        Ok(self.push(t, Op::PadTime { x, left }))
    }

    /// Looks up rows of `table` [rows, dim]: `indices` is [batch * frames]
    /// (batch-major) and the result is laid out [batch, dim, frames].
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], batch: usize) -> Result<Var> {
        let (rows, dim) = match self.shape(table) {
            &[r, d] => (r, d),
            s => return Err(Error::shape(format!("gather table must be rank 2, got {s:?}"))),
        };
        if batch == 0 || indices.len() % batch != 0 || indices.is_empty() {
            return Err(Error::shape("gather: indices not divisible by batch"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather index {bad} >= {rows}")));
        }
        let frames = indices.len() / batch;
        let td = self.data(table);
        let mut out = vec![0.0; batch * dim * frames];
        for n in 0..batch {
            for f in 0..frames {
                let row = &td[indices[n * frames + f] * dim..][..dim];
                for (d, &v) in row.iter().enumerate() {
                    out[(n * dim + d) * frames + f] = v;
                }
            }
        }
        let t = Tensor::new(vec![batch, dim, frames], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.data(a).len() as f64;
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::MseTo(a, b)))
    }

    /// `mean((x - target)^2)`.
    pub fn mse_to(&mut self, x: Var, target: f64) -> Var {
        let d = self.data(x);
        let s = d.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::MseToConst(x, target))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let n = self.data(a).len() as f64;
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::L1To(a, b)))
    }

    /// Forward value `value`, backward identity to `x` (straight-through).
    pub fn straight_through(&mut self, x: Var, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(self.shape(x).to_vec(), value)?;
        Ok(self.push(t, Op::StraightThrough(x)))
    }

    /// Batch-mean of a reconstruction loss between fixed references and the
    /// rows of `x` [batch, 1, time].
    pub fn signal_loss(&mut self, x: Var, references: &[&[f64]], loss: &dyn SignalLoss) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        if ch != 1 || references.len() != batch {
            return Err(Error::shape(format!(
                "signal loss: estimate [{batch}, {ch}, {len}], {} references",
                references.len()
            )));
        }
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(batch * len);
        for (row, r) in self.data(x).chunks_exact(len).zip(references) {
            let (v, g) = loss.value_and_grad(r, row)?;
            total += v / batch as f64;
            grad.extend(g.into_iter().map(|g| g / batch as f64));
        }
        Ok(self.push(Tensor::scalar(total), Op::Fused { x, grad }))
    }

    /// Reverse pass from a scalar `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotAScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.rg(v) {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        sum_into(ga, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    sum_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(&bd) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(&ad) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Square(a) => {
                let ad = self.data(*a).to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), v) in ga.iter_mut().zip(g).zip(&ad) {
                        *x += 2.0 * v * gy;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if let Some(gv) = self.acc(grads, v) {
                        gv[0] += c * g[0];
                    }
                }
            }
            Op::Conv1d { x, w, b, spec } => self.conv1d_backward(*x, *w, *b, *spec, g, grads),
            Op::ConvTranspose1d { x, w, b, spec } => {
                self.conv_transpose1d_backward(*x, *w, *b, *spec, g, grads)
            }
            Op::Snake { x, alpha, sin_sq, sin_2x } => {
                let (_, ch, len) = self.value(*x).dims3()?;
                let xd = self.data(*x);
                let a = self.data(*alpha);
                let mut gx = self.take_acc(grads, *x);
                let mut ga = self.take_acc(grads, *alpha);
                for (i, row) in g.chunks_exact(len).enumerate() {
                    let c = i % ch;
                    let inv = 1.0 / (a[c] + SNAKE_EPS);
                    let span = i * len..(i + 1) * len;
                    if let Some(gx) = gx.as_mut() {
                        for ((d, gy), s2) in gx[span.clone()].iter_mut().zip(row).zip(&sin_2x[span.clone()]) {
                            *d += gy * (1.0 + s2);
                        }
                    }
                    if let Some(ga) = ga.as_mut() {
                        let mut acc = 0.0;
                        for (((gy, v), s2), ss) in row.iter().zip(&xd[span.clone()]).zip(&sin_2x[span.clone()]).zip(&sin_sq[span]) {
                            acc += gy * (inv * v * s2 - inv * inv * ss);
                        }
                        ga[c] += acc;
                    }
                }
                Self::put_acc(grads, *x, gx);
                Self::put_acc(grads, *alpha, ga);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, gy), yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gy * (1.0 - yv * yv);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xd = self.data(*x).to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, gy), v) in gx.iter_mut().zip(g).zip(&xd) {
                        *d += if *v > 0.0 { *gy } else { slope * gy };
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (_, _, len) = self.value(*x).dims3()?;
                let half = len / 2;
                if let Some(gx) = self.acc(grads, *x) {
                    for (row, gr) in gx.chunks_exact_mut(len).zip(g.chunks_exact(half)) {
                        for (i, &v) in gr.iter().enumerate() {
                            row[2 * i] += 0.5 * v;
                            row[2 * i + 1] += 0.5 * v;
                        }
                    }
                }
            }
            Op::Upsample { x, resampler } => {
                let (_, _, len) = self.value(*x).dims3()?;
                let f = resampler.factor();
                if let Some(gx) = self.acc(grads, *x) {
                    for (row, gr) in gx.chunks_exact_mut(len).zip(g.chunks_exact(len * f)) {
                        sum_into(row, &resampler.up_adjoint(gr));
                    }
                }
            }
            Op::CropTime { x, from } => {
                let (_, _, len_in) = self.value(*x).dims3()?;
                let len = node.value.shape()[2];
                if let Some(gx) = self.acc(grads, *x) {
                    for (row, gr) in gx.chunks_exact_mut(len_in).zip(g.chunks_exact(len)) {
                        sum_into(&mut row[*from..from + len], gr);
                    }
                }
            }
            Op::PadTime { x, left } => {
                let (_, _, len) = self.value(*x).dims3()?;
                let out_len = node.value.shape()[2];
                if let Some(gx) = self.acc(grads, *x) {
                    for (row, gr) in gx.chunks_exact_mut(len).zip(g.chunks_exact(out_len)) {
                        sum_into(row, &gr[*left..left + len]);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let dim = self.shape(*table)[1];
                let (batch, _, frames) = node.value.dims3()?;
                if let Some(gt) = self.acc(grads, *table) {
                    for n in 0..batch {
                        for f in 0..frames {
                            let row = indices[n * frames + f];
                            for d in 0..dim {
                                gt[row * dim + d] += g[(n * dim + d) * frames + f];
                            }
                        }
                    }
                }
            }
            Op::MseTo(a, b) => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                let s = 2.0 * g[0] / ad.len() as f64;
                let diff: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| s * (x - y)).collect();
                if let Some(ga) = self.acc(grads, *a) {
                    sum_into(ga, &diff);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&diff).for_each(|(x, d)| *x -= d);
                }
            }
            Op::MseToConst(x, target) => {
                let xd = self.data(*x).to_vec();
                let s = 2.0 * g[0] / xd.len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(&xd).for_each(|(d, v)| *d += s * (v - target));
                }
            }
            Op::L1To(a, b) => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                let s = g[0] / ad.len() as f64;
                let sg: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            s
                        } else if d < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if let Some(ga) = self.acc(grads, *a) {
                    sum_into(ga, &sg);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&sg).for_each(|(x, d)| *x -= d);
                }
            }
            Op::StraightThrough(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    sum_into(gx, g);
                }
            }
            Op::Fused { x, grad } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(grad).for_each(|(d, v)| *d += g[0] * v);
                }
            }
        }
        Ok(())
    }

    /// Moves the accumulator of `v` out of `grads` (zeroed if absent).
    fn take_acc(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        self.rg(v)
            .then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]))
    }

    fn put_acc(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
        if buf.is_some() {
            grads[v.0] = buf;
        }
    }

    fn bias_backward(&self, b: Option<Var>, c_out: usize, t_out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gb) = b.and_then(|b| self.acc(grads, b)) {
            for (i, row) in g.chunks_exact(t_out).enumerate() {
                gb[i % c_out] += row.iter().sum::<f64>();
            }
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv1dSpec,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (batch, c_in, len) = self.value(x).dims3().expect("checked in forward");
        let (c_out, _, kernel) = self.value(w).dims3().expect("checked in forward");
        let t_out = g.len() / (batch * c_out);
        let unfold = Unfold {
            channels: c_in,
            len,
            kernel,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            positions: t_out,
        };
        let xd = self.data(x);
        let wd = self.data(w);
        if let Some(gw) = self.acc(grads, w) {
            for n in 0..batch {
                let gy = &g[n * c_out * t_out..(n + 1) * c_out * t_out];
                let cols = unfold.im2col(&xd[n * c_in * len..(n + 1) * c_in * len]);
                gemm(c_out, t_out, c_in * kernel, gy, false, &cols, true, 1.0, gw);
            }
        }
        if let Some(gx) = self.acc(grads, x) {
            let mut dcols = vec![0.0; c_in * kernel * t_out];
            for n in 0..batch {
                let gy = &g[n * c_out * t_out..(n + 1) * c_out * t_out];
                gemm(c_in * kernel, c_out, t_out, wd, true, gy, false, 0.0, &mut dcols);
                unfold.col2im(&dcols, &mut gx[n * c_in * len..(n + 1) * c_in * len]);
            }
        }
        self.bias_backward(b, c_out, t_out, g, grads);
    }

    fn conv_transpose1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvTransposeSpec,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (batch, c_in, len) = self.value(x).dims3().expect("checked in forward");
        let (_, c_out, kernel) = self.value(w).dims3().expect("checked in forward");
        let t_out = g.len() / (batch * c_out);
        let unfold = Unfold {
            channels: c_out,
            len: t_out,
            kernel,
            stride: spec.stride,
            padding: spec.padding,
            dilation: 1,
            positions: len,
        };
        let xd = self.data(x);
        let wd = self.data(w);
        let mut gw = self.take_acc(grads, w);
        let mut gx = self.take_acc(grads, x);
        for n in 0..batch {
            let cols = unfold.im2col(&g[n * c_out * t_out..(n + 1) * c_out * t_out]);
            let xs = n * c_in * len..(n + 1) * c_in * len;
            if let Some(gx) = gx.as_mut() {
                gemm(c_in, c_out * kernel, len, wd, false, &cols, false, 1.0, &mut gx[xs.clone()]);
            }
            if let Some(gw) = gw.as_mut() {
                gemm(c_in, len, c_out * kernel, &xd[xs], false, &cols, true, 1.0, gw);
            }
        }
        Self::put_acc(grads, w, gw);
        Self::put_acc(grads, x, gx);
        self.bias_backward(b, c_out, t_out, g, grads);
    }
}
