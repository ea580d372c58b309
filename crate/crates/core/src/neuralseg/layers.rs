//! Forward and backward kernels for every node kind. Shapes are checked by
//! the graph before these run; the kernels only assert.

use rayon::prelude::*;

use super::tensor::{matmul, FeatureTensor, Real, Transpose};

pub fn conv_output_dims(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if stride == 0 || ph < kernel || pw < kernel {
        return None;
    }
    Some(((ph - kernel) / stride + 1, (pw - kernel) / stride + 1))
}

/// Convolution geometry.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

fn im2col<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (k, cin) = (g.kernel, g.in_channels);
    let plen = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                let dst = &mut row[ky * k * cin..(ky + 1) * k * cin];
                if iy < 0 || iy as usize >= h {
                    dst.fill(T::zero());
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let d = &mut dst[kx * cin..(kx + 1) * cin];
                    if ix < 0 || ix as usize >= w {
                        d.fill(T::zero());
                    } else {
                        let src = (iy as usize * w + ix as usize) * cin;
                        d.copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let (k, cin) = (g.kernel, g.in_channels);
    let plen = g.patch_len();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = (ky * k + kx) * cin;
                    for c in 0..cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Zero-padded strided convolution. Weights are laid out
/// `[ky][kx][in][out]`.
pub fn conv_forward<T: Real>(
    x: &FeatureTensor<T>,
    weight: &[T],
    bias: &[T],
    g: &ConvGeometry,
) -> FeatureTensor<T> {
    assert_eq!(x.channels, g.in_channels);
    assert_eq!(weight.len(), g.weight_len());
    assert_eq!(bias.len(), g.out_channels);
    let (oh, ow) = conv_output_dims(x.height, x.width, g.kernel, g.stride, g.pad)
        .expect("convolution output is non-empty");
    let mut y = FeatureTensor::zeros((x.batch, oh, ow, g.out_channels));
    let in_len = x.sample_len();
    let out_len = oh * ow * g.out_channels;
    let plen = g.patch_len();
    y.data
        .par_chunks_mut(out_len)
        .zip(x.data.par_chunks(in_len))
        .for_each(|(ys, xs)| {
            let mut cols = vec![T::zero(); oh * ow * plen];
            im2col(xs, x.height, x.width, g, oh, ow, &mut cols);
            matmul(oh * ow, plen, g.out_channels, &cols, weight, ys, Transpose::None, false);
            for px in ys.chunks_exact_mut(g.out_channels) {
                for (v, &b) in px.iter_mut().zip(bias) {
                    *v += b;
                }
            }
        });
    y
}

/// Returns `(dx, dweight, dbias)`. Per-sample weight gradients are reduced
/// in sample order.
pub fn conv_backward<T: Real>(
    x: &FeatureTensor<T>,
    weight: &[T],
    dy: &FeatureTensor<T>,
    g: &ConvGeometry,
) -> (FeatureTensor<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (dy.height, dy.width);
    let plen = g.patch_len();
    let in_len = x.sample_len();
    let out_len = dy.sample_len();
    let mut dx = FeatureTensor::zeros(x.shape());
    let partial: Vec<Vec<T>> = dx
        .data
        .par_chunks_mut(in_len)
        .zip(x.data.par_chunks(in_len))
        .zip(dy.data.par_chunks(out_len))
        .map(|((dxs, xs), dys)| {
            let mut cols = vec![T::zero(); oh * ow * plen];
            im2col(xs, x.height, x.width, g, oh, ow, &mut cols);
            let mut dw = vec![T::zero(); g.weight_len()];
            matmul(plen, oh * ow, g.out_channels, &cols, dys, &mut dw, Transpose::A, false);
            matmul(oh * ow, g.out_channels, plen, dys, weight, &mut cols, Transpose::B, false);
            col2im(&cols, x.height, x.width, g, oh, ow, dxs);
            dw
        })
        .collect();
    let mut dweight = vec![T::zero(); g.weight_len()];
    for dw in partial {
        for (a, b) in dweight.iter_mut().zip(dw) {
            *a += b;
        }
    }
    let mut dbias = vec![T::zero(); g.out_channels];
    for px in dy.data.chunks_exact(g.out_channels) {
        for (a, &b) in dbias.iter_mut().zip(px) {
            *a += b;
        }
    }
    (dx, dweight, dbias)
}

pub fn zero_pad_forward<T: Real>(x: &FeatureTensor<T>, pad: usize) -> FeatureTensor<T> {
    let (h, w, c) = (x.height + 2 * pad, x.width + 2 * pad, x.channels);
    let mut y = FeatureTensor::zeros((x.batch, h, w, c));
    for n in 0..x.batch {
        for r in 0..x.height {
            let src = x.idx(n, r, 0, 0);
            let dst = y.idx(n, r + pad, pad, 0);
            y.data[dst..dst + x.width * c].copy_from_slice(&x.data[src..src + x.width * c]);
        }
    }
    y
}

pub fn zero_pad_backward<T: Real>(dy: &FeatureTensor<T>, pad: usize) -> FeatureTensor<T> {
    let (h, w, c) = (dy.height - 2 * pad, dy.width - 2 * pad, dy.channels);
    let mut dx = FeatureTensor::zeros((dy.batch, h, w, c));
    for n in 0..dy.batch {
        for r in 0..h {
            let src = dy.idx(n, r + pad, pad, 0);
            let dst = dx.idx(n, r, 0, 0);
            dx.data[dst..dst + w * c].copy_from_slice(&dy.data[src..src + w * c]);
        }
    }
    dx
}

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.9;

/// Intermediate values kept for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch-statistics normalization over every `(sample, row, col)`.
pub fn batch_norm_train<T: Real>(
    x: &FeatureTensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (FeatureTensor<T>, BatchNormCache<T>) {
    let c = x.channels;
    let count = T::of((x.data.len() / c) as f64);
    let mut mean = vec![T::zero(); c];
    for px in x.data.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); c];
    for px in x.data.chunks_exact(c) {
        for k in 0..c {
            let d = px[k] - mean[k];
            var[k] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    let eps = T::of(BN_EPSILON);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.data.len()];
    let mut y = FeatureTensor::zeros(x.shape());
    for (i, (&v, (xn, yo))) in x
        .data
        .iter()
        .zip(normalized.iter_mut().zip(y.data.iter_mut()))
        .enumerate()
    {
        let k = i % c;
        *xn = (v - mean[k]) * inv_std[k];
        *yo = gamma[k] * *xn + beta[k];
    }
    (
        y,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var,
        },
    )
}

/// Normalization with fixed running statistics.
pub fn batch_norm_infer<T: Real>(
    x: &FeatureTensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> FeatureTensor<T> {
    let c = x.channels;
    let eps = T::of(BN_EPSILON);
    let scale: Vec<T> = (0..c)
        .map(|k| gamma[k] / (running_var[k] + eps).sqrt())
        .collect();
    let shift: Vec<T> = (0..c)
        .map(|k| beta[k] - running_mean[k] * scale[k])
        .collect();
    let mut y = x.clone();
    for px in y.data.chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = px[k] * scale[k] + shift[k];
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    dy: &FeatureTensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> (FeatureTensor<T>, Vec<T>, Vec<T>) {
    let c = dy.channels;
    let count = T::of((dy.data.len() / c) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (&g, &xn)) in dy.data.iter().zip(&cache.normalized).enumerate() {
        let k = i % c;
        dbeta[k] += g;
        dgamma[k] += g * xn;
    }
    let mut dx = FeatureTensor::zeros(dy.shape());
    for (i, ((&g, &xn), o)) in dy
        .data
        .iter()
        .zip(&cache.normalized)
        .zip(dx.data.iter_mut())
        .enumerate()
    {
        let k = i % c;
        *o = gamma[k] * cache.inv_std[k] / count * (count * g - dbeta[k] - xn * dgamma[k]);
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Real>(x: &FeatureTensor<T>) -> FeatureTensor<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

pub fn relu_backward<T: Real>(x: &FeatureTensor<T>, dy: &FeatureTensor<T>) -> FeatureTensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// 2x2 max pooling; the winning flat input index is returned per output.
pub fn max_pool_forward<T: Real>(x: &FeatureTensor<T>) -> (FeatureTensor<T>, Vec<u32>) {
    let (oh, ow, c) = (x.height / 2, x.width / 2, x.channels);
    let mut y = FeatureTensor::zeros((x.batch, oh, ow, c));
    let mut arg = vec![0u32; y.data.len()];
    for n in 0..x.batch {
        for r in 0..oh {
            for q in 0..ow {
                for k in 0..c {
                    let mut best = x.idx(n, 2 * r, 2 * q, k);
                    for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.idx(n, 2 * r + dr, 2 * q + dq, k);
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                    let o = y.idx(n, r, q, k);
                    y.data[o] = x.data[best];
                    arg[o] = best as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward<T: Real>(
    input_shape: (usize, usize, usize, usize),
    dy: &FeatureTensor<T>,
    arg: &[u32],
) -> FeatureTensor<T> {
    let mut dx = FeatureTensor::zeros(input_shape);
    for (&g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Block average by an integer factor per axis.
pub fn downsample_mean<T: Real>(x: &FeatureTensor<T>, fy: usize, fx: usize) -> FeatureTensor<T> {
    let (oh, ow, c) = (x.height / fy, x.width / fx, x.channels);
    let scale = T::one() / T::of((fy * fx) as f64);
    let mut y = FeatureTensor::zeros((x.batch, oh, ow, c));
    for n in 0..x.batch {
        for r in 0..x.height {
            for q in 0..x.width {
                let o = y.idx(n, r / fy, q / fx, 0);
                let i = x.idx(n, r, q, 0);
                for k in 0..c {
                    y.data[o + k] += x.data[i + k] * scale;
                }
            }
        }
    }
    y
}

/// Adjoint of [`downsample_mean`].
pub fn downsample_mean_backward<T: Real>(
    input_shape: (usize, usize, usize, usize),
    dy: &FeatureTensor<T>,
    fy: usize,
    fx: usize,
) -> FeatureTensor<T> {
    let scale = T::one() / T::of((fy * fx) as f64);
    let mut dx = FeatureTensor::zeros(input_shape);
    let c = dx.channels;
    for n in 0..dx.batch {
        for r in 0..dx.height {
            for q in 0..dx.width {
                let o = dy.idx(n, r / fy, q / fx, 0);
                let i = dx.idx(n, r, q, 0);
                for k in 0..c {
                    dx.data[i + k] = dy.data[o + k] * scale;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor replication by an integer factor per axis.
pub fn upsample_nearest<T: Real>(x: &FeatureTensor<T>, fy: usize, fx: usize) -> FeatureTensor<T> {
    let (oh, ow, c) = (x.height * fy, x.width * fx, x.channels);
    let mut y = FeatureTensor::zeros((x.batch, oh, ow, c));
    for n in 0..x.batch {
        for r in 0..oh {
            for q in 0..ow {
                let i = x.idx(n, r / fy, q / fx, 0);
                let o = y.idx(n, r, q, 0);
                y.data[o..o + c].copy_from_slice(&x.data[i..i + c]);
            }
        }
    }
    y
}

/// Adjoint of [`upsample_nearest`].
pub fn upsample_nearest_backward<T: Real>(
    input_shape: (usize, usize, usize, usize),
    dy: &FeatureTensor<T>,
    fy: usize,
    fx: usize,
) -> FeatureTensor<T> {
    let mut dx = FeatureTensor::zeros(input_shape);
    let c = dx.channels;
    for n in 0..dy.batch {
        for r in 0..dy.height {
            for q in 0..dy.width {
                let o = dy.idx(n, r, q, 0);
                let i = dx.idx(n, r / fy, q / fx, 0);
                for k in 0..c {
                    dx.data[i + k] += dy.data[o + k];
                }
            }
        }
    }
    dx
}

/// How a resize node maps its source onto the target resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizePlan {
    Identity,
    Up(usize, usize),
    Down(usize, usize),
}

pub fn resize_plan(from: (usize, usize), to: (usize, usize)) -> Option<ResizePlan> {
    let ((h, w), (th, tw)) = (from, to);
    if h == 0 || w == 0 || th == 0 || tw == 0 {
        return None;
    }
    if (h, w) == (th, tw) {
        Some(ResizePlan::Identity)
    } else if th >= h && tw >= w && th % h == 0 && tw % w == 0 {
        Some(ResizePlan::Up(th / h, tw / w))
    } else if th <= h && tw <= w && h % th == 0 && w % tw == 0 {
        Some(ResizePlan::Down(h / th, w / tw))
    } else {
        None
    }
}

pub fn resize_forward<T: Real>(x: &FeatureTensor<T>, plan: ResizePlan) -> FeatureTensor<T> {
    match plan {
        ResizePlan::Identity => x.clone(),
        ResizePlan::Up(fy, fx) => upsample_nearest(x, fy, fx),
        ResizePlan::Down(fy, fx) => downsample_mean(x, fy, fx),
    }
}

pub fn resize_backward<T: Real>(
    input_shape: (usize, usize, usize, usize),
    dy: &FeatureTensor<T>,
    plan: ResizePlan,
) -> FeatureTensor<T> {
    match plan {
        ResizePlan::Identity => dy.clone(),
        ResizePlan::Up(fy, fx) => upsample_nearest_backward(input_shape, dy, fy, fx),
        ResizePlan::Down(fy, fx) => downsample_mean_backward(input_shape, dy, fy, fx),
    }
}

/// Element-wise product; an operand with one channel is broadcast across
/// the channels of the other.
pub fn multiply_forward<T: Real>(a: &FeatureTensor<T>, b: &FeatureTensor<T>) -> FeatureTensor<T> {
    let c = a.channels.max(b.channels);
    let mut y = FeatureTensor::zeros((a.batch, a.height, a.width, c));
    for (p, out) in y.data.chunks_exact_mut(c).enumerate() {
        for (k, o) in out.iter_mut().enumerate() {
            let av = a.data[p * a.channels + if a.channels == 1 { 0 } else { k }];
            let bv = b.data[p * b.channels + if b.channels == 1 { 0 } else { k }];
            *o = av * bv;
        }
    }
    y
}

pub fn multiply_backward<T: Real>(
    a: &FeatureTensor<T>,
    b: &FeatureTensor<T>,
    dy: &FeatureTensor<T>,
) -> (FeatureTensor<T>, FeatureTensor<T>) {
    let c = dy.channels;
    let mut da = FeatureTensor::zeros(a.shape());
    let mut db = FeatureTensor::zeros(b.shape());
    for (p, g) in dy.data.chunks_exact(c).enumerate() {
        for (k, &gv) in g.iter().enumerate() {
            let ia = p * a.channels + if a.channels == 1 { 0 } else { k };
            let ib = p * b.channels + if b.channels == 1 { 0 } else { k };
            da.data[ia] += gv * b.data[ib];
            db.data[ib] += gv * a.data[ia];
        }
    }
    (da, db)
}

pub fn add_forward<T: Real>(a: &FeatureTensor<T>, b: &FeatureTensor<T>) -> FeatureTensor<T> {
    let mut y = a.clone();
    y.add_assign(b);
    y
}

/// Per-pixel softmax over channels.
pub fn softmax_forward<T: Real>(x: &FeatureTensor<T>) -> FeatureTensor<T> {
    let mut y = x.clone();
    for px in y.data.chunks_exact_mut(x.channels) {
        let max = px.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in px.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

pub fn softmax_backward<T: Real>(y: &FeatureTensor<T>, dy: &FeatureTensor<T>) -> FeatureTensor<T> {
    let c = y.channels;
    let mut dx = FeatureTensor::zeros(y.shape());
    for ((p, g), o) in y
        .data
        .chunks_exact(c)
        .zip(dy.data.chunks_exact(c))
        .zip(dx.data.chunks_exact_mut(c))
    {
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for k in 0..c {
            o[k] = p[k] * (g[k] - dot);
        }
    }
    dx
}
