use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{self, Geom};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::kspace::{CenteredFft2, KSpaceSample};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `max(x, 0) + slope * min(x, 0)`; the derivative at 0 is `slope`.
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
}

/// How a data-consistency layer combines network k-space with measurements.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DcMode {
    /// Sampled frequencies are overwritten by the measurements.
    #[default]
    Replace,
    /// Sampled frequencies become `(k + lambda * y) / (1 + lambda)`.
    NoiseWeighted { lambda: f64 },
}

impl DcMode {
    /// Weight kept on the network's own k-space at sampled locations.
    fn keep(self) -> f64 {
        match self {
            DcMode::Replace => 0.0,
            DcMode::NoiseWeighted { lambda } => 1.0 / (1.0 + lambda),
        }
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics observed in train mode, used by the caller to
/// update running averages.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

#[derive(Debug)]
struct DcData<T: Real> {
    fft: CenteredFft2<T>,
    keep: T,
    kept_columns: Vec<Vec<bool>>,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleByVar { x: Var, s: Var },
    SampleScale { x: Var, scale: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Act { x: Var, kind: Activation },
    ChannelScale { x: Var, factors: Vec<T> },
    Concat { a: Var, b: Var },
    Repeat { x: Var, times: usize },
    Pad { x: Var, top: usize, left: usize },
    Magnitude { x: Var },
    Dc { x: Var, data: DcData<T> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    MeanAbsDiff(Var, Var),
    Bce { p: Var, targets: Vec<T>, lo: T, hi: T },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn dims4<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::Shape(format!("{what} expects a 4-d [B, C, H, W] tensor, got {s:?}"))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// A constant copy of `v`'s value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// `x * s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape(format!("scale_by expects a scalar, got {:?}", self.shape(s))));
        }
        let k = self.item(s);
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleByVar { x, s }, rg))
    }

    /// Multiplies sample `b` of a batch by the constant `scale[b]`.
    pub fn sample_scale(&mut self, x: Var, scale: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        let batch = v.shape()[0];
        if scale.len() != batch {
            return Err(Error::Shape(format!("sample_scale: {} factors for batch {batch}", scale.len())));
        }
        let inner = v.numel() / batch;
        let data = v.data().iter().enumerate().map(|(i, &e)| e * scale[i / inner]).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SampleScale { x, scale }, rg))
    }

    /// Strided, zero-padded 2D cross-correlation (no kernel flip).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [batch, c, h, wd] = dims4(self.value(x), "conv2d input")?;
        let [f, wc, kh, kw] = dims4(self.value(w), "conv2d weight")?;
        if wc != c {
            return Err(Error::Shape(format!("conv2d: input has {c} channels, weight expects {wc}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(Error::Shape(format!("conv2d: bias {:?}, expected [{f}]", self.shape(b))));
            }
        }
        let ho = conv::conv_out_extent(h, kh, stride, pad)?;
        let wo = conv::conv_out_extent(wd, kw, stride, pad)?;
        let g = Geom { c, h, w: wd, kh, kw, stride, pad, ho, wo };

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); batch * f * ho * wo];
        let mut col = vec![T::zero(); g.rows() * g.cols()];
        for n in 0..batch {
            conv::im2col(&xv[n * c * h * wd..(n + 1) * c * h * wd], &g, &mut col);
            let dst = &mut out[n * f * ho * wo..(n + 1) * f * ho * wo];
            conv::weight_times_col(wv, f, &g, &col, dst);
            if let Some(b) = b {
                add_channel_bias(dst, self.value(b).data(), ho * wo);
            }
        }
        let value = Tensor::new(vec![batch, f, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] with the same
    /// weight `[F, C, kh, kw]`, mapping `F` channels back to `C`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [batch, f, hi, wi] = dims4(self.value(x), "conv_transpose2d input")?;
        let [wf, c, kh, kw] = dims4(self.value(w), "conv_transpose2d weight")?;
        if wf != f {
            return Err(Error::Shape(format!("conv_transpose2d: input has {f} channels, weight expects {wf}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::Shape(format!("conv_transpose2d: bias {:?}, expected [{c}]", self.shape(b))));
            }
        }
        let h = conv::conv_transpose_out_extent(hi, kh, stride, pad)?;
        let wd = conv::conv_transpose_out_extent(wi, kw, stride, pad)?;
        let g = Geom { c, h, w: wd, kh, kw, stride, pad, ho: hi, wo: wi };

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); batch * c * h * wd];
        let mut col = vec![T::zero(); g.rows() * g.cols()];
        for n in 0..batch {
            conv::weight_t_times(wv, f, &g, &xv[n * f * hi * wi..(n + 1) * f * hi * wi], &mut col);
            let dst = &mut out[n * c * h * wd..(n + 1) * c * h * wd];
            conv::col2im_add(&col, &g, dst);
            if let Some(b) = b {
                add_channel_bias(dst, self.value(b).data(), h * wd);
            }
        }
        let value = Tensor::new(vec![batch, c, h, wd], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::ConvT2d { x, w, b, stride, pad }, rg))
    }

    /// Per-channel batch normalization over `[B, H, W]`.
    ///
    /// In train mode returns the batch statistics for the caller's running
    /// averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let [batch, c, h, w] = dims4(self.value(x), "batch_norm input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma {:?} / beta {:?}, expected [{c}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let hw = h * w;
        let m = batch * hw;
        let xv = self.value(x).data();
        let eps = T::of(eps);

        let (mean, var, train) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::DegenerateBatch(m));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for n in 0..batch {
                        s += xv[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0f64;
                    for n in 0..batch {
                        ss += xv[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v.f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(mu);
                    var[ch] = T::of(ss / m as f64);
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("batch_norm: running statistics length mismatch".into()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..batch {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let stats = train.then(|| {
            let unbias = T::of(m as f64 / (m - 1) as f64);
            BnStats { mean: mean.clone(), var: var.iter().map(|&v| v * unbias).collect() }
        });
        let value = Tensor::new(vec![batch, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg);
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::LeakyRelu { slope } => {
                let s = T::of(slope);
                self.value(x).map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Sigmoid => self.value(x).map(|v| T::one() / (T::one() + (-v).exp())),
            Activation::Tanh => self.value(x).map(T::tanh),
        };
        let rg = self.rg(x);
        self.push(value, Op::Act { x, kind }, rg)
    }

    /// Multiplies channel `(b, c)` by `factors[b * C + c]`.
    pub fn channel_scale(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let [batch, c, h, w] = dims4(self.value(x), "channel_scale input")?;
        if factors.len() != batch * c {
            return Err(Error::Shape(format!("channel_scale: {} factors for {batch}x{c} channels", factors.len())));
        }
        let hw = h * w;
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * factors[i / hw]).collect();
        let value = Tensor::new(vec![batch, c, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ChannelScale { x, factors }, rg))
    }

    /// Zeroes whole channels with probability `rate` and rescales survivors by
    /// `1 / (1 - rate)`. Without an `rng` (eval mode) this is the identity.
    pub fn channel_dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let [batch, c, _, _] = dims4(self.value(x), "channel_dropout input")?;
        let survive = T::of(1.0 / (1.0 - rate));
        let factors = (0..batch * c).map(|_| if rng.random::<f64>() < rate { T::zero() } else { survive }).collect();
        self.channel_scale(x, factors)
    }

    /// Concatenates two `[B, *, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = dims4(self.value(a), "concat")?;
        let [nb, cb, hb, wb] = dims4(self.value(b), "concat")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let hw = ha * wa;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for n in 0..na {
            data.extend_from_slice(&va[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&vb[n * cb * hw..(n + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Tiles the channel block `times` times: `[B, C, H, W] -> [B, C*times, H, W]`.
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "repeat_channels")?;
        if times == 0 {
            return Err(Error::Config("repeat_channels: times must be positive".into()));
        }
        let block = c * h * w;
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(v.len() * times);
        for i in 0..n {
            for _ in 0..times {
                data.extend_from_slice(&v[i * block..(i + 1) * block]);
            }
        }
        let value = Tensor::new(vec![n, c * times, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Repeat { x, times }, rg))
    }

    /// Zero-pads the spatial axes by `[top, bottom, left, right]`.
    pub fn zero_pad(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "zero_pad")?;
        let [top, bottom, left, right] = pads;
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut value = Tensor::zeros([n, c, ho, wo]);
        let src = self.value(x).data();
        let dst = value.data_mut();
        for plane in 0..n * c {
            for y in 0..h {
                let o = (plane * ho + y + top) * wo + left;
                dst[o..o + w].copy_from_slice(&src[(plane * h + y) * w..(plane * h + y + 1) * w]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Pad { x, top, left }, rg))
    }

    /// Complex magnitude of a 2-channel (real, imaginary) tensor.
    pub fn magnitude(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "magnitude")?;
        if c != 2 {
            return Err(Error::Shape(format!("magnitude expects 2 channels, got {c}")));
        }
        let hw = h * w;
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(n * hw);
        for i in 0..n {
            let (re, im) = (&v[2 * i * hw..(2 * i + 1) * hw], &v[(2 * i + 1) * hw..(2 * i + 2) * hw]);
            data.extend(re.iter().zip(im).map(|(&a, &b)| a.hypot(b)));
        }
        let value = Tensor::new(vec![n, 1, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Magnitude { x }, rg))
    }

    /// Data-consistency layer on a 2-channel batch: sample `b`'s k-space is
    /// combined with `samples[b]`'s measurements at sampled columns.
    pub fn data_consistency(&mut self, x: Var, samples: &[KSpaceSample], mode: DcMode) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "data_consistency")?;
        if c != 2 {
            return Err(Error::Shape(format!("data_consistency expects 2 channels, got {c}")));
        }
        if samples.len() != n {
            return Err(Error::Shape(format!("data_consistency: {} samples for batch {n}", samples.len())));
        }
        for s in samples {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "data_consistency: sample is {}x{}, image is {h}x{w}",
                    s.height(),
                    s.width()
                )));
            }
        }
        let fft = CenteredFft2::<T>::new(h, w);
        let keep = T::of(mode.keep());
        let one_minus = T::one() - keep;
        let hw = h * w;
        let mut data = self.value(x).data().to_vec();
        for (i, s) in samples.iter().enumerate() {
            let (re, im) = data[2 * i * hw..(2 * i + 2) * hw].split_at_mut(hw);
            fft.forward(re, im);
            let y = s.measurements();
            for (col, &kept) in s.mask().kept().iter().enumerate() {
                if !kept {
                    continue;
                }
                for row in 0..h {
                    let k = row * w + col;
                    re[k] = keep * re[k] + one_minus * T::of(y.real()[k]);
                    im[k] = keep * im[k] + one_minus * T::of(y.imag()[k]);
                }
            }
            fft.inverse(re, im);
        }
        let value = Tensor::new(vec![n, 2, h, w], data)?;
        let kept_columns = samples.iter().map(|s| s.mask().kept().to_vec()).collect();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dc { x, data: DcData { fft, keep, kept_columns } }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mse")?;
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / T::of(va.numel() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    /// Mean of absolute differences over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mean_abs_diff")?;
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / T::of(va.numel() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MeanAbsDiff(a, b), rg))
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to
    /// `[lo, hi]`) against a constant target.
    pub fn bce(&mut self, p: Var, target: T, lo: T, hi: T) -> Var {
        let targets = vec![target; self.value(p).numel()];
        self.bce_targets(p, targets, lo, hi).expect("target length matches")
    }

    /// Mean binary cross-entropy against per-element constant targets.
    /// Clamped elements pass no gradient.
    pub fn bce_targets(&mut self, p: Var, targets: Vec<T>, lo: T, hi: T) -> Result<Var> {
        let v = self.value(p);
        if targets.len() != v.numel() {
            return Err(Error::Shape(format!("bce: {} targets for {} probabilities", targets.len(), v.numel())));
        }
        let one = T::one();
        let s: T = v
            .data()
            .iter()
            .zip(&targets)
            .map(|(&q, &t)| {
                let q = q.max(lo).min(hi);
                -(t * q.ln() + (one - t) * (one - q).ln())
            })
            .sum();
        let value = Tensor::scalar(s / T::of(v.numel() as f64));
        let rg = self.rg(p);
        Ok(self.push(value, Op::Bce { p, targets, lo, hi }, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Adds into the gradient buffer of `v`, allocating zeros on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &y)| *d += g * y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &x)| *d += g * x));
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)),
            Op::ScaleByVar { x, s } => {
                let k = val(*s)[0];
                let vx = val(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * k));
                acc(*s, &mut |d| d[0] += g.iter().zip(vx).map(|(&g, &x)| g * x).sum::<T>());
            }
            Op::SampleScale { x, scale } => {
                let inner = g.len() / scale.len();
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).enumerate().for_each(|(i, (d, &g))| *d += g * scale[i / inner])
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv_backward(*x, *w, *b, *stride, *pad, g, grads, false);
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                self.conv_backward(*x, *w, *b, *stride, *pad, g, grads, true);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let [n, c, h, w] = dims4(&nodes[x.0].value, "").expect("checked in forward");
                let hw = h * w;
                let m = T::of((n * hw) as f64);
                let gv = val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                acc(*x, &mut |d| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + hw {
                                d[i] += if *train {
                                    k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Act { x, kind } => {
                let y = node.value.data();
                let vx = val(*x);
                acc(*x, &mut |d| match *kind {
                    Activation::LeakyRelu { slope } => {
                        let s = T::of(slope);
                        for ((d, &g), &x) in d.iter_mut().zip(g).zip(vx) {
                            *d += if x > T::zero() { g } else { g * s };
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += g * y * (T::one() - y);
                        }
                    }
                    Activation::Tanh => {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += g * (T::one() - y * y);
                        }
                    }
                });
            }
            Op::ChannelScale { x, factors } => {
                let hw = g.len() / factors.len();
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).enumerate().for_each(|(i, (d, &g))| *d += g * factors[i / hw])
                });
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = dims4(&nodes[a.0].value, "").expect("checked in forward");
                let cb = nodes[b.0].value.shape()[1];
                let hw = h * w;
                let ct = ca + cb;
                acc(*a, &mut |d| {
                    for i in 0..n {
                        add_into(&mut d[i * ca * hw..(i + 1) * ca * hw], &g[i * ct * hw..(i * ct + ca) * hw]);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..n {
                        add_into(&mut d[i * cb * hw..(i + 1) * cb * hw], &g[(i * ct + ca) * hw..(i + 1) * ct * hw]);
                    }
                });
            }
            Op::Repeat { x, times } => {
                let n = nodes[x.0].value.shape()[0];
                let block = nodes[x.0].value.numel() / n;
                acc(*x, &mut |d| {
                    for i in 0..n {
                        for t in 0..*times {
                            let off = (i * times + t) * block;
                            add_into(&mut d[i * block..(i + 1) * block], &g[off..off + block]);
                        }
                    }
                });
            }
            Op::Pad { x, top, left } => {
                let [n, c, h, w] = dims4(&nodes[x.0].value, "").expect("checked in forward");
                let [_, _, ho, wo] = dims4(&node.value, "").expect("checked in forward");
                acc(*x, &mut |d| {
                    for plane in 0..n * c {
                        for y in 0..h {
                            let o = (plane * ho + y + top) * wo + left;
                            add_into(&mut d[(plane * h + y) * w..(plane * h + y + 1) * w], &g[o..o + w]);
                        }
                    }
                });
            }
            Op::Magnitude { x } => {
                let hw = g.len() / nodes[x.0].value.shape()[0];
                let vx = val(*x);
                let mag = node.value.data();
                acc(*x, &mut |d| {
                    for (p, (&gm, &r)) in g.iter().zip(mag).enumerate() {
                        if r == T::zero() {
                            continue;
                        }
                        let (i, k) = (p / hw, p % hw);
                        let (ri, ii) = (2 * i * hw + k, (2 * i + 1) * hw + k);
                        d[ri] += gm * vx[ri] / r;
                        d[ii] += gm * vx[ii] / r;
                    }
                });
            }
            Op::Dc { x, data } => {
                let (h, w) = (data.fft.height(), data.fft.width());
                let hw = h * w;
                acc(*x, &mut |d| {
                    let mut buf = g.to_vec();
                    for (i, kept) in data.kept_columns.iter().enumerate() {
                        let (re, im) = buf[2 * i * hw..(2 * i + 2) * hw].split_at_mut(hw);
                        data.fft.forward(re, im);
                        for (col, &k) in kept.iter().enumerate() {
                            if k {
                                for row in 0..h {
                                    re[row * w + col] *= data.keep;
                                    im[row * w + col] *= data.keep;
                                }
                            }
                        }
                        data.fft.inverse(re, im);
                    }
                    add_into(d, &buf);
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let k = g[0] / T::of(nodes[x.0].value.numel() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += k));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let k = T::of(2.0) * g[0] / T::of(va.len() as f64);
                acc(*a, &mut |d| d.iter_mut().zip(va.iter().zip(vb)).for_each(|(d, (&x, &y))| *d += k * (x - y)));
                acc(*b, &mut |d| d.iter_mut().zip(va.iter().zip(vb)).for_each(|(d, (&x, &y))| *d -= k * (x - y)));
            }
            Op::MeanAbsDiff(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let k = g[0] / T::of(va.len() as f64);
                let sign = |x: T, y: T| {
                    if x > y {
                        T::one()
                    } else if x < y {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                acc(*a, &mut |d| d.iter_mut().zip(va.iter().zip(vb)).for_each(|(d, (&x, &y))| *d += k * sign(x, y)));
                acc(*b, &mut |d| d.iter_mut().zip(va.iter().zip(vb)).for_each(|(d, (&x, &y))| *d -= k * sign(x, y)));
            }
            Op::Bce { p, targets, lo, hi } => {
                let vp = val(*p);
                let k = g[0] / T::of(vp.len() as f64);
                acc(*p, &mut |d| {
                    for ((d, &q), &t) in d.iter_mut().zip(vp).zip(targets) {
                        if q >= *lo && q <= *hi {
                            *d += k * (-(t / q) + (T::one() - t) / (T::one() - q));
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        transpose: bool,
    ) {
        let xs = self.nodes[x.0].value.shape();
        let ws = self.nodes[w.0].value.shape();
        let (batch, f, c, kh, kw) = (xs[0], ws[0], ws[1], ws[2], ws[3]);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();

        // For conv2d the image side is the input; for the transpose it is the output.
        let (geom, img_len, cols_len) = if transpose {
            let (hi, wi) = (xs[2], xs[3]);
            let h = (hi - 1) * stride + kh - 2 * pad;
            let wd = (wi - 1) * stride + kw - 2 * pad;
            (Geom { c, h, w: wd, kh, kw, stride, pad, ho: hi, wo: wi }, c * h * wd, f * hi * wi)
        } else {
            let (h, wd) = (xs[2], xs[3]);
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (wd + 2 * pad - kw) / stride + 1;
            (Geom { c, h, w: wd, kh, kw, stride, pad, ho, wo }, c * h * wd, f * ho * wo)
        };

        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let mut col = vec![T::zero(); geom.rows() * geom.cols()];

        if let Some(b) = b {
            if self.nodes[b.0].requires_grad {
                let out_c = if transpose { c } else { f };
                let plane = g.len() / (batch * out_c);
                let db = grads[b.0].get_or_insert_with(|| vec![T::zero(); out_c]);
                for n in 0..batch {
                    for ch in 0..out_c {
                        let off = (n * out_c + ch) * plane;
                        db[ch] += g[off..off + plane].iter().copied().sum::<T>();
                    }
                }
            }
        }

        if need_w {
            let mut dw = grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wv.len()]);
            for n in 0..batch {
                if transpose {
                    conv::im2col(&g[n * img_len..(n + 1) * img_len], &geom, &mut col);
                    conv::accumulate_weight_grad(&xv[n * cols_len..(n + 1) * cols_len], f, &geom, &col, &mut dw);
                } else {
                    conv::im2col(&xv[n * img_len..(n + 1) * img_len], &geom, &mut col);
                    conv::accumulate_weight_grad(&g[n * cols_len..(n + 1) * cols_len], f, &geom, &col, &mut dw);
                }
            }
            grads[w.0] = Some(dw);
        }

        if need_x {
            let mut dx = grads[x.0].take().unwrap_or_else(|| vec![T::zero(); xv.len()]);
            if transpose {
                let mut tmp = vec![T::zero(); cols_len];
                for n in 0..batch {
                    conv::im2col(&g[n * img_len..(n + 1) * img_len], &geom, &mut col);
                    conv::weight_times_col(wv, f, &geom, &col, &mut tmp);
                    add_into(&mut dx[n * cols_len..(n + 1) * cols_len], &tmp);
                }
            } else {
                for n in 0..batch {
                    conv::weight_t_times(wv, f, &geom, &g[n * cols_len..(n + 1) * cols_len], &mut col);
                    conv::col2im_add(&col, &geom, &mut dx[n * img_len..(n + 1) * img_len]);
                }
            }
            grads[x.0] = Some(dx);
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn add_channel_bias<T: Real>(dst: &mut [T], bias: &[T], plane: usize) {
    for (ch, chunk) in dst.chunks_mut(plane).enumerate() {
        let b = bias[ch];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}
