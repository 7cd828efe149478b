use std::fmt;

use rand::Rng;

use super::{Float, NnError, Result, Tensor, TrainMode};

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Default batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Mirror padding of the two spatial axes; the edge pixel is not repeated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReflectionPad {
    pub pad: usize,
}

/// Stride-1 cross-correlation with per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Float> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `(out_channels, in_channels, kernel, kernel)`
    pub weight: Tensor<T>,
    /// `(out_channels,)`
    pub bias: Tensor<T>,
}

/// Per-channel normalisation with learned affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T: Float> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Fully connected layer, `y = x·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Float> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`
    pub weight: Tensor<T>,
    /// `(out_features,)`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Float> {
    ReflectionPad(ReflectionPad),
    Conv(Conv2d<T>),
    Relu,
    BatchNorm(BatchNorm2d<T>),
    MaxPool2x2,
    Flatten,
    Linear(Linear<T>),
}

/// Layer tag, also used as the checkpoint record tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LayerKind {
    ReflectionPad = 1,
    Conv = 2,
    Relu = 3,
    BatchNorm = 4,
    MaxPool = 5,
    Flatten = 6,
    Linear = 7,
}

impl LayerKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => Self::ReflectionPad,
            2 => Self::Conv,
            3 => Self::Relu,
            4 => Self::BatchNorm,
            5 => Self::MaxPool,
            6 => Self::Flatten,
            7 => Self::Linear,
            _ => return None,
        })
    }
}

/// What a layer remembers from a traced forward pass beyond its input.
#[derive(Debug, Clone)]
pub(crate) enum Cache<T> {
    None,
    BatchNorm { mean: Vec<T>, inv_std: Vec<T> },
    MaxPool { argmax: Vec<usize> },
}

fn uniform_tensor<T: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

impl<T: Float> Conv2d<T> {
    /// Fan-in scaled uniform init, bound `sqrt(1 / (in·k·k))`.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / (in_channels * kernel * kernel) as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: uniform_tensor(&[out_channels, in_channels, kernel, kernel], bound, rng),
            bias: uniform_tensor(&[out_channels], bound, rng),
        }
    }
}

impl<T: Float> Linear<T> {
    /// Fan-in scaled uniform init, bound `sqrt(1 / in_features)`.
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: uniform_tensor(&[out_features, in_features], bound, rng),
            bias: uniform_tensor(&[out_features], bound, rng),
        }
    }
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

// ---------------------------------------------------------------------------
// Stateless forward kernels.

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub fn reflection_pad<T: Float>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if pad >= h || pad >= w {
        return Err(NnError::InvalidArgument(format!(
            "reflection padding {pad} must be smaller than spatial extents {h}×{w}"
        )));
    }
    if pad == 0 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let cols: Vec<usize> = (0..wo).map(|j| mirror(j as isize - pad as isize, w)).collect();
    let src = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..ho {
            let si = mirror(i as isize - pad as isize, h);
            let row = &sp[si * w..(si + 1) * w];
            for (d, &sj) in dp[i * wo..(i + 1) * wo].iter_mut().zip(&cols) {
                *d = row[sj];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

fn reflection_pad_backward<T: Float>(grad_out: &Tensor<T>, in_shape: &[usize], pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let g = grad_out.data();
    let edges: Vec<(usize, usize)> = (0..pad)
        .chain(w + pad..wo)
        .map(|j| (j, mirror(j as isize - pad as isize, w)))
        .collect();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
        let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for i in 0..ho {
            let si = mirror(i as isize - pad as isize, h);
            let (src, dst) = (&gp[i * wo..(i + 1) * wo], &mut dp[si * w..(si + 1) * w]);
            for (d, &v) in dst.iter_mut().zip(&src[pad..pad + w]) {
                *d += v;
            }
            for &(j, sj) in &edges {
                dst[sj] += src[j];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Unfold one `(c, h, w)` plane stack into `(c·k·k) × (ho·wo)` columns.
fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let hw = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let s = ch * h * w + (oy + ki) * w + kj;
                    dst[oy * wo..(oy + 1) * wo].copy_from_slice(&x[s..s + wo]);
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let hw = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let s = ch * h * w + (oy + ki) * w + kj;
                    for (d, &v) in dx[s..s + wo].iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Float>(x: &Tensor<T>, conv: &Conv2d<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let k = conv.kernel;
    if c != conv.in_channels {
        return Err(NnError::InvalidArgument(format!(
            "conv expects {} input channels, got {c}",
            conv.in_channels
        )));
    }
    if k > h || k > w {
        return Err(NnError::InvalidArgument(format!(
            "kernel {k} larger than input {h}×{w}"
        )));
    }
    let (ho, wo) = (h - k + 1, w - k + 1);
    let ckk = c * k * k;
    let cout = conv.out_channels;
    let mut cols = vec![T::zero(); ckk * ho * wo];
    let mut out = vec![T::zero(); n * cout * ho * wo];
    let bias = conv.bias.data();
    for s in 0..n {
        im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, k, &mut cols);
        let o = &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo];
        for (oc, plane) in o.chunks_mut(ho * wo).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[oc]);
        }
        T::gemm(false, false, cout, ho * wo, ckk, T::one(), conv.weight.data(), &cols, T::one(), o);
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

/// `c += a·bᵀ` for row-major `a` (m×k) and `b` (n×k) with small m, n and a
/// long k. The general gemm packs poorly for this shape.
fn accumulate_abt<T: Float>(a: &[T], b: &[T], m: usize, n: usize, k: usize, c: &mut [T]) {
    const BLOCK: usize = 1024;
    for k0 in (0..k).step_by(BLOCK) {
        let k1 = (k0 + BLOCK).min(k);
        for j in 0..n {
            let bj = &b[j * k + k0..j * k + k1];
            for i in 0..m {
                c[i * n + j] += dot(&a[i * k + k0..i * k + k1], bj);
            }
        }
    }
}

fn dot<T: Float>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: T = xc.remainder().iter().zip(yc.remainder()).map(|(&p, &q)| p * q).fold(T::zero(), |s, v| s + v);
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

fn conv2d_backward<T: Float>(conv: &mut Conv2d<T>, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let k = conv.kernel;
    let (ho, wo) = (h - k + 1, w - k + 1);
    let hw = ho * wo;
    let ckk = c * k * k;
    let cout = conv.out_channels;
    let mut cols = vec![T::zero(); ckk * hw];
    let mut dcols = vec![T::zero(); ckk * hw];
    let mut dx = vec![T::zero(); n * c * h * w];
    let g = grad_out.data();
    for s in 0..n {
        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
        im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, k, &mut cols);
        accumulate_abt(gs, &cols, cout, ckk, hw, conv.weight.grad_mut());
        let db = conv.bias.grad_mut();
        for (oc, plane) in gs.chunks(hw).enumerate() {
            db[oc] += plane.iter().copied().sum();
        }
        T::gemm(true, false, ckk, hw, cout, T::one(), conv.weight.data(), gs, T::zero(), &mut dcols);
        col2im(&dcols, c, h, w, k, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
    }
    Tensor::new(x.shape().to_vec(), dx)
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

fn relu_backward<T: Float>(x: &Tensor<T>, mut grad_out: Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(NnError::InvalidArgument(format!(
            "relu gradient {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    for (g, &xi) in grad_out.data_mut().iter_mut().zip(x.data()) {
        if xi <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad_out)
}

fn channel_stats<T: Float>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| v.to_f64().unwrap())
                .sum::<f64>();
        }
        let mu = s / m;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}

fn batchnorm_apply<T: Float>(
    x: &Tensor<T>,
    bn: &BatchNorm2d<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = x.clone();
    let (gamma, beta) = (bn.gamma.data(), bn.beta.data());
    for b in 0..n {
        for ch in 0..c {
            let (mu, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = g * ((*v - mu) * is) + be);
        }
    }
    Ok(out)
}

/// Batch normalisation. In [`TrainMode::Training`] batch statistics are used
/// and the running estimates are blended as `new = (1 − m)·old + m·batch`
/// (unbiased batch variance); in evaluation mode the running estimates are
/// used and nothing is mutated.
pub fn batchnorm<T: Float>(x: &Tensor<T>, bn: &mut BatchNorm2d<T>, mode: TrainMode) -> Result<Tensor<T>> {
    batchnorm_traced(x, bn, mode).map(|(y, _)| y)
}

fn batchnorm_traced<T: Float>(
    x: &Tensor<T>,
    bn: &mut BatchNorm2d<T>,
    mode: TrainMode,
) -> Result<(Tensor<T>, Cache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if c != bn.channels {
        return Err(NnError::InvalidArgument(format!(
            "batch norm expects {} channels, got {c}",
            bn.channels
        )));
    }
    match mode {
        TrainMode::Evaluation => {
            let (mean, inv_std) = bn.running_inv_std();
            let y = batchnorm_apply(x, bn, &mean, &inv_std)?;
            Ok((y, Cache::BatchNorm { mean, inv_std }))
        }
        TrainMode::Training => {
            let m = n * h * w;
            if m < 2 {
                return Err(NnError::InvalidArgument(format!(
                    "training-mode batch norm needs at least 2 values per channel, got {m}"
                )));
            }
            let (mean, var) = channel_stats(x.data(), n, c, h * w);
            let unbias = m as f64 / (m - 1) as f64;
            for ch in 0..c {
                let old_m = bn.running_mean[ch].to_f64().unwrap();
                let old_v = bn.running_var[ch].to_f64().unwrap();
                bn.running_mean[ch] = T::lit((1.0 - bn.momentum) * old_m + bn.momentum * mean[ch]);
                bn.running_var[ch] = T::lit((1.0 - bn.momentum) * old_v + bn.momentum * var[ch] * unbias);
            }
            let mean_t: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();
            let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + bn.eps).sqrt())).collect();
            let y = batchnorm_apply(x, bn, &mean_t, &inv_std)?;
            Ok((y, Cache::BatchNorm { mean: mean_t, inv_std }))
        }
    }
}

impl<T: Float> BatchNorm2d<T> {
    fn running_inv_std(&self) -> (Vec<T>, Vec<T>) {
        let inv = self
            .running_var
            .iter()
            .map(|v| T::lit(1.0 / (v.to_f64().unwrap() + self.eps).sqrt()))
            .collect();
        (self.running_mean.clone(), inv)
    }
}

fn batchnorm_backward<T: Float>(
    bn: &mut BatchNorm2d<T>,
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    training: bool,
    mut grad_out: Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if grad_out.shape() != x.shape() {
        return Err(NnError::InvalidArgument(format!(
            "batch norm gradient {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let g = grad_out.data_mut();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ch in 0..c {
        let (mu, is) = (mean[ch].to_f64().unwrap(), inv_std[ch].to_f64().unwrap());
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (xv, gv) in xd[r.clone()].iter().zip(&g[r]) {
                let gv = gv.to_f64().unwrap();
                sum_g += gv;
                sum_gx += gv * (xv.to_f64().unwrap() - mu);
            }
        }
        sum_gx *= is;
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let gamma = bn.gamma.data()[ch].to_f64().unwrap();
        // dx = kg·g + kx·(x − μ) + k0
        let (kg, kx, k0) = if training {
            (gamma * is, -gamma * is * is * sum_gx / m, -gamma * is * sum_g / m)
        } else {
            (gamma * is, 0.0, 0.0)
        };
        let (kg, kx, k0, mu) = (T::lit(kg), T::lit(kx), T::lit(k0), mean[ch]);
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (gv, &xv) in g[r.clone()].iter_mut().zip(&xd[r]) {
                *gv = kg * *gv + kx * (xv - mu) + k0;
            }
        }
    }
    for ch in 0..c {
        bn.gamma.grad_mut()[ch] += T::lit(dgamma[ch]);
        bn.beta.grad_mut()[ch] += T::lit(dbeta[ch]);
    }
    Ok(grad_out)
}

pub fn maxpool2x2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool_traced(x).map(|(y, _)| y)
}

fn maxpool_traced<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::InvalidArgument(format!(
            "2×2 max pooling needs even extents, got {h}×{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for idx in [
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ] {
                    // strict comparison keeps the first maximum in row-major order
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, argmax))
}

pub fn flatten<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let f = x.len() / n;
    x.clone().reshape(&[n, f])
}

pub fn linear<T: Float>(x: &Tensor<T>, lin: &Linear<T>) -> Result<Tensor<T>> {
    let (n, f) = x.dims2()?;
    if f != lin.in_features {
        return Err(NnError::InvalidArgument(format!(
            "linear layer expects {} features, got {f}",
            lin.in_features
        )));
    }
    let g = lin.out_features;
    let mut out = Vec::with_capacity(n * g);
    for _ in 0..n {
        out.extend_from_slice(lin.bias.data());
    }
    T::gemm(false, true, n, g, f, T::one(), x.data(), lin.weight.data(), T::one(), &mut out);
    Tensor::new(vec![n, g], out)
}

fn linear_backward<T: Float>(lin: &mut Linear<T>, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = x.dims2()?;
    let g = lin.out_features;
    let gd = grad_out.data();
    T::gemm(true, false, g, f, n, T::one(), gd, x.data(), T::one(), lin.weight.grad_mut());
    let db = lin.bias.grad_mut();
    for row in gd.chunks(g) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let mut dx = vec![T::zero(); n * f];
    T::gemm(false, false, n, f, g, T::one(), gd, lin.weight.data(), T::zero(), &mut dx);
    Tensor::new(vec![n, f], dx)
}

// ---------------------------------------------------------------------------

impl<T: Float> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::ReflectionPad(_) => LayerKind::ReflectionPad,
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Relu => LayerKind::Relu,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::MaxPool2x2 => LayerKind::MaxPool,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Linear(_) => LayerKind::Linear,
        }
    }

    /// Pure forward pass; batch norm uses running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::ReflectionPad(p) => reflection_pad(x, p.pad),
            Layer::Conv(c) => conv2d(x, c),
            Layer::Relu => Ok(relu(x)),
            Layer::BatchNorm(bn) => {
                let (mean, inv_std) = bn.running_inv_std();
                batchnorm_apply(x, bn, &mean, &inv_std)
            }
            Layer::MaxPool2x2 => maxpool2x2(x),
            Layer::Flatten => flatten(x),
            Layer::Linear(l) => linear(x, l),
        }
    }

    pub(crate) fn forward_traced(&mut self, x: &Tensor<T>, mode: TrainMode) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::BatchNorm(bn) => batchnorm_traced(x, bn, mode),
            Layer::MaxPool2x2 => {
                let (y, argmax) = maxpool_traced(x)?;
                Ok((y, Cache::MaxPool { argmax }))
            }
            other => Ok((other.infer(x)?, Cache::None)),
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub(crate) fn backward(
        &mut self,
        x: &Tensor<T>,
        cache: &Cache<T>,
        mode: TrainMode,
        grad_out: Tensor<T>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (Layer::ReflectionPad(p), _) => reflection_pad_backward(&grad_out, x.shape(), p.pad),
            (Layer::Conv(c), _) => conv2d_backward(c, x, &grad_out),
            (Layer::Relu, _) => relu_backward(x, grad_out),
            (Layer::BatchNorm(bn), Cache::BatchNorm { mean, inv_std }) => {
                batchnorm_backward(bn, x, mean, inv_std, mode == TrainMode::Training, grad_out)
            }
            (Layer::MaxPool2x2, Cache::MaxPool { argmax }) => {
                let mut dx = vec![T::zero(); x.len()];
                for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                    dx[idx] += g;
                }
                Tensor::new(x.shape().to_vec(), dx)
            }
            (Layer::Flatten, _) => grad_out.reshape(x.shape()),
            (Layer::Linear(l), _) => linear_backward(l, x, &grad_out),
            (layer, _) => Err(NnError::State(format!(
                "trace entry does not match layer {:?}",
                layer.kind()
            ))),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }
}

/// Float formatting as the reference listing prints it (`1e-05`, `0.1`).
fn python_float(v: f64) -> String {
    let abs = v.abs();
    if abs != 0.0 && !(1e-4..1e16).contains(&abs) {
        let s = format!("{v:e}");
        let (mant, exp) = s.split_once('e').expect("exponent form");
        let exp: i32 = exp.parse().expect("integer exponent");
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        format!("{v}")
    }
}

impl<T: Float> fmt::Display for Layer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::ReflectionPad(p) => {
                let p = p.pad;
                write!(f, "ReflectionPad2d(({p}, {p}, {p}, {p}))")
            }
            Layer::Conv(c) => write!(
                f,
                "Conv2d({}, {}, kernel_size=({k}, {k}), stride=(1, 1))",
                c.in_channels,
                c.out_channels,
                k = c.kernel
            ),
            Layer::Relu => write!(f, "ReLU(inplace)"),
            Layer::BatchNorm(bn) => write!(
                f,
                "BatchNorm2d({}, eps={}, momentum={}, affine=True, track_running_stats=True)",
                bn.channels,
                python_float(bn.eps),
                bn.momentum
            ),
            Layer::MaxPool2x2 => write!(f, "MaxPool2d(kernel_size=2, stride=2)"),
            Layer::Flatten => write!(f, "Flatten"),
            Layer::Linear(l) => write!(
                f,
                "Linear(in_features={}, out_features={}, bias=True)",
                l.in_features, l.out_features
            ),
        }
    }
}
