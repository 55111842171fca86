use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{matmul, Param, Real, Tensor};

fn expect_rank4(x: &Tensor<impl Real>, channels: usize) -> Result<[usize; 4]> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::ShapeMismatch {
            expected: vec![0, channels, 0, 0],
            actual: s.to_vec(),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

fn he_uniform<T: Real>(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of_f64(rng.random_range(-bound..bound))).collect()
}

/// 2-D convolution, stride 1, zero "same" padding of `kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub(crate) need_input_grad: bool,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    in_shape: [usize; 4],
    cols: Vec<Vec<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(
            "conv.weight",
            vec![out_channels, in_channels, kernel, kernel],
            he_uniform(rng, fan_in, out_channels * fan_in),
        );
        let bias = bias.then(|| Param::new("conv.bias", vec![out_channels], vec![T::zero(); out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
            need_input_grad: true,
            cache: None,
        }
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn im2col(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let k = self.kernel;
        let pad = self.pad();
        let hw = h * w;
        let mut cols = vec![T::zero(); self.in_channels * k * k * hw];
        for c in 0..self.in_channels {
            let plane = &x[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dx = kj as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let s0 = (x_lo as isize + dx) as usize;
                        dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize) -> Vec<T> {
        let k = self.kernel;
        let pad = self.pad();
        let hw = h * w;
        let mut x = vec![T::zero(); self.in_channels * hw];
        for c in 0..self.in_channels {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dx = kj as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let base = sy as usize * w;
                        for xx in x_lo..x_hi {
                            plane[base + (xx as isize + dx) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        x
    }

    fn run(&self, x: &Tensor<T>, keep_cols: bool) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
        let [b, _, h, w] = expect_rank4(x, self.in_channels)?;
        let hw = h * w;
        let f = self.out_channels;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let cols = self.im2col(x.row(i), h, w);
                let mut out = vec![T::zero(); f * hw];
                if let Some(bias) = &self.bias {
                    for (row, &bv) in out.chunks_mut(hw).zip(&bias.value) {
                        row.iter_mut().for_each(|v| *v = bv);
                    }
                }
                matmul(&self.weight.value, false, &cols, false, &mut out, f, ckk, hw, self.bias.is_some());
                (out, if keep_cols { cols } else { Vec::new() })
            })
            .collect();
        let mut data = Vec::with_capacity(b * f * hw);
        let mut cols = Vec::with_capacity(if keep_cols { b } else { 0 });
        for (out, c) in per_sample {
            data.extend_from_slice(&out);
            if keep_cols {
                cols.push(c);
            }
        }
        let y = Tensor::new(vec![b, f, h, w], data)?;
        let cache = keep_cols.then_some(ConvCache {
            in_shape: [b, self.in_channels, h, w],
            cols,
        });
        Ok((y, cache))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let [b, c, h, w] = cache.in_shape;
        let hw = h * w;
        let f = self.out_channels;
        let ckk = c * self.kernel * self.kernel;
        if dy.shape() != [b, f, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![b, f, h, w],
                actual: dy.shape().to_vec(),
            });
        }
        let need_dx = self.need_input_grad;
        let this = &*self;
        let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let g = dy.row(i);
                let cols = &cache.cols[i];
                let mut dw = vec![T::zero(); f * ckk];
                matmul(g, false, cols, true, &mut dw, f, hw, ckk, false);
                let db: Vec<T> = g.chunks(hw).map(|r| r.iter().copied().sum()).collect();
                let dx = if need_dx {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    matmul(&this.weight.value, true, g, false, &mut dcols, ckk, f, hw, false);
                    this.col2im(&dcols, h, w)
                } else {
                    Vec::new()
                };
                (dw, db, dx)
            })
            .collect();
        let mut dx_all = Vec::with_capacity(if need_dx { b * c * hw } else { 0 });
        for (dw, db, dx) in per_sample {
            for (acc, v) in self.weight.grad.iter_mut().zip(dw) {
                *acc += v;
            }
            if let Some(bias) = &mut self.bias {
                for (acc, v) in bias.grad.iter_mut().zip(db) {
                    *acc += v;
                }
            }
            dx_all.extend_from_slice(&dx);
        }
        if need_dx {
            Tensor::new(vec![b, c, h, w], dx_all)
        } else {
            Ok(Tensor::zeros(vec![b, c, h, w]))
        }
    }
}

/// Rectified linear unit.
#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    fn run(x: &Tensor<T>) -> Tensor<T> {
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn backward(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::BackwardBeforeForward)?;
        if x.shape() != dy.shape() {
            return Err(Error::ShapeMismatch {
                expected: x.shape().to_vec(),
                actual: dy.shape().to_vec(),
            });
        }
        let data = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Smallest |input| seen in the last training forward pass.
    pub fn min_abs_input(&self) -> Option<f64> {
        self.input
            .as_ref()
            .map(|x| x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs())))
    }

    pub(crate) fn mask(&self) -> Option<Vec<bool>> {
        self.input.as_ref().map(|x| x.data().iter().map(|&v| v > T::zero()).collect())
    }
}

/// Per-channel batch normalization over batch and spatial axes.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> BatchNorm2d<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new("bn.gamma", vec![channels], vec![T::one(); channels]),
            beta: Param::new("bn.beta", vec![channels], vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            cache: None,
        }
    }

    fn train_forward(&mut self, x: &Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        let [b, c, h, w] = expect_rank4(x, self.channels)?;
        let hw = h * w;
        let n = (b * hw) as f64;
        let mut y = vec![T::zero(); x.len()];
        let mut x_hat = vec![T::zero(); if keep { x.len() } else { 0 }];
        let mut inv_stds = vec![0.0; c];
        let xd = x.data();
        #[allow(clippy::needless_range_loop)]
        for ch in 0..c {
            let mut sum = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                sum += xd[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                sq += xd[base..base + hw].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / n;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[ch] = inv_std;
            let g = self.gamma.value[ch].as_f64();
            let be = self.beta.value[ch].as_f64();
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i].as_f64() - mean) * inv_std;
                    y[i] = T::of_f64(g * xh + be);
                    if keep {
                        x_hat[i] = T::of_f64(xh);
                    }
                }
            }
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[ch] = T::of_f64((1.0 - m) * self.running_mean[ch].as_f64() + m * mean);
            self.running_var[ch] = T::of_f64((1.0 - m) * self.running_var[ch].as_f64() + m * unbiased);
        }
        if keep {
            self.cache = Some(BnCache {
                x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
                inv_std: inv_stds,
            });
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = expect_rank4(x, self.channels)?;
        let hw = h * w;
        let scale: Vec<f64> = (0..c)
            .map(|ch| self.gamma.value[ch].as_f64() / (self.running_var[ch].as_f64() + self.eps).sqrt())
            .collect();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                let xh = v.as_f64() - self.running_mean[ch].as_f64();
                T::of_f64(scale[ch] * xh + self.beta.value[ch].as_f64())
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let xh = cache.x_hat.data();
        if dy.shape() != cache.x_hat.shape() {
            return Err(Error::ShapeMismatch {
                expected: cache.x_hat.shape().to_vec(),
                actual: dy.shape().to_vec(),
            });
        }
        let s = dy.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let n = (b * hw) as f64;
        let g = dy.data();
        let mut dx = vec![T::zero(); dy.len()];
        for ch in 0..c {
            let mut dbeta = 0.0;
            let mut dgamma = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let gi = g[i].as_f64();
                    dbeta += gi;
                    dgamma += gi * xh[i].as_f64();
                }
            }
            self.beta.grad[ch] += T::of_f64(dbeta);
            self.gamma.grad[ch] += T::of_f64(dgamma);
            let k = self.gamma.value[ch].as_f64() * cache.inv_std[ch] / n;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let v = k * (n * g[i].as_f64() - dbeta - xh[i].as_f64() * dgamma);
                    dx[i] = T::of_f64(v);
                }
            }
        }
        Tensor::new(s.to_vec(), dx)
    }
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    in_shape: Vec<usize>,
    argmax: Vec<usize>,
    min_gap: f64,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Self {
        Self { size, cache: None }
    }

    fn run<T: Real>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0, 0],
                actual: s.to_vec(),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.size;
        let (oh, ow) = (h / p, w / p);
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let mut min_gap = f64::INFINITY;
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * p * w + ox * p;
                    let mut top = xd[best];
                    let mut second = T::neg_infinity();
                    for dy in 0..p {
                        for dx in 0..p {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            let idx = base + (oy * p + dy) * w + ox * p + dx;
                            let v = xd[idx];
                            if v > top {
                                second = top;
                                top = v;
                                best = idx;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    let gap = (top - second).as_f64();
                    if gap > 0.0 && gap < min_gap {
                        min_gap = gap;
                    }
                    out.push(top);
                    argmax.push(best);
                }
            }
        }
        let y = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok((
            y,
            PoolCache {
                in_shape: s.to_vec(),
                argmax,
                min_gap,
            },
        ))
    }

    fn backward<T: Real>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        if dy.len() != cache.argmax.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![cache.argmax.len()],
                actual: dy.shape().to_vec(),
            });
        }
        let mut dx = Tensor::zeros(cache.in_shape.clone());
        let d = dx.data_mut();
        for (&idx, &g) in cache.argmax.iter().zip(dy.data()) {
            d[idx] += g;
        }
        Ok(dx)
    }

    /// Smallest strictly positive gap between the largest and second-largest
    /// entry of any window in the last training forward pass.
    pub fn min_gap(&self) -> Option<f64> {
        self.cache.as_ref().map(|c| c.min_gap)
    }

    pub(crate) fn argmax(&self) -> Option<&[usize]> {
        self.cache.as_ref().map(|c| c.argmax.as_slice())
    }
}

/// Fully connected layer; any input is flattened to `[batch, features]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub(crate) need_input_grad: bool,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(
                "dense.weight",
                vec![out_features, in_features],
                he_uniform(rng, in_features, in_features * out_features),
            ),
            bias: Param::new("dense.bias", vec![out_features], vec![T::zero(); out_features]),
            need_input_grad: true,
            input: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = x.batch();
        if x.row_len() != self.in_features {
            return Err(Error::ShapeMismatch {
                expected: vec![b, self.in_features],
                actual: x.shape().to_vec(),
            });
        }
        let (i, o) = (self.in_features, self.out_features);
        let mut y = Vec::with_capacity(b * o);
        for _ in 0..b {
            y.extend_from_slice(&self.bias.value);
        }
        matmul(x.data(), false, &self.weight.value, true, &mut y, b, i, o, true);
        Tensor::new(vec![b, o], y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let b = x.batch();
        let (i, o) = (self.in_features, self.out_features);
        if dy.shape() != [b, o] {
            return Err(Error::ShapeMismatch {
                expected: vec![b, o],
                actual: dy.shape().to_vec(),
            });
        }
        matmul(dy.data(), true, x.data(), false, &mut self.weight.grad, o, b, i, true);
        for row in dy.data().chunks(o) {
            for (acc, &g) in self.bias.grad.iter_mut().zip(row) {
                *acc += g;
            }
        }
        if self.need_input_grad {
            let mut dx = vec![T::zero(); b * i];
            matmul(dy.data(), false, &self.weight.value, false, &mut dx, b, o, i, false);
            Tensor::new(x.shape().to_vec(), dx)
        } else {
            Ok(Tensor::zeros(x.shape().to_vec()))
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Relu(Relu<T>),
    BatchNorm(BatchNorm2d<T>),
    MaxPool(MaxPool2d),
    Dense(Dense<T>),
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu(_) => "relu",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::MaxPool(_) => "max_pool",
            Layer::Dense(_) => "dense",
        }
    }

    /// Forward pass. With `train` set, batch statistics are used and the
    /// intermediate values needed by [`Layer::backward`] are cached.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if !train {
            self.clear_cache();
            return self.infer(x);
        }
        match self {
            Layer::Conv(l) => {
                let (y, cache) = l.run(x, true)?;
                l.cache = cache;
                Ok(y)
            }
            Layer::Relu(l) => {
                l.input = Some(x.clone());
                Ok(Relu::run(x))
            }
            Layer::BatchNorm(l) => l.train_forward(x, true),
            Layer::MaxPool(l) => {
                let (y, cache) = l.run(x)?;
                l.cache = Some(cache);
                Ok(y)
            }
            Layer::Dense(l) => {
                let y = l.run(x)?;
                l.input = Some(x.clone());
                Ok(y)
            }
        }
    }

    /// Inference-mode forward pass; does not touch caches or statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => Ok(l.run(x, false)?.0),
            Layer::Relu(_) => Ok(Relu::run(x)),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::MaxPool(l) => Ok(l.run(x)?.0),
            Layer::Dense(l) => l.run(x),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::MaxPool(l) => l.backward(dy),
            Layer::Dense(l) => l.backward(dy),
        }
    }

    pub fn has_cache(&self) -> bool {
        match self {
            Layer::Conv(l) => l.cache.is_some(),
            Layer::Relu(l) => l.input.is_some(),
            Layer::BatchNorm(l) => l.cache.is_some(),
            Layer::MaxPool(l) => l.cache.is_some(),
            Layer::Dense(l) => l.input.is_some(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.cache = None,
            Layer::Relu(l) => l.input = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::Dense(l) => l.input = None,
        }
    }

    pub(crate) fn set_need_input_grad(&mut self, need: bool) {
        match self {
            Layer::Conv(l) => l.need_input_grad = need,
            Layer::Dense(l) => l.need_input_grad = need,
            _ => {}
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Relu(_) | Layer::MaxPool(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Relu(_) | Layer::MaxPool(_) => Vec::new(),
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<&Vec<T>> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::of_f64(x.as_f64())).collect::<Vec<U>>();
        match self {
            Layer::Conv(l) => Layer::Conv(Conv2d {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                weight: l.weight.cast(),
                bias: l.bias.as_ref().map(Param::cast),
                need_input_grad: l.need_input_grad,
                cache: None,
            }),
            Layer::Relu(_) => Layer::Relu(Relu::new()),
            Layer::BatchNorm(l) => Layer::BatchNorm(BatchNorm2d {
                channels: l.channels,
                gamma: l.gamma.cast(),
                beta: l.beta.cast(),
                running_mean: cv(&l.running_mean),
                running_var: cv(&l.running_var),
                momentum: l.momentum,
                eps: l.eps,
                cache: None,
            }),
            Layer::MaxPool(l) => Layer::MaxPool(MaxPool2d::new(l.size)),
            Layer::Dense(l) => Layer::Dense(Dense {
                in_features: l.in_features,
                out_features: l.out_features,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                need_input_grad: l.need_input_grad,
                input: None,
            }),
        }
    }
}
