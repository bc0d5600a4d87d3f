//! Small tensor kernels with hand-written gradients: same-padded 2-D
//! convolution, 2x2 max pooling and its unpooling inverse, dense layers,
//! the logistic sigmoid, MSE and plain SGD.
//!
//! Layers are generic over the scalar so the networks can train in `f32`
//! while gradient checks run in `f64`.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};

use num_traits::{Float, NumAssignOps};
use rand::Rng;

use crate::error::{Error, Result};

pub trait Real: Float + NumAssignOps + Default + Debug + Display + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn lit<T: Real>(x: f64) -> T {
    T::from(x).expect("literal fits the scalar type")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lit(rng.gen_range(-bound..=bound))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, k: T) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.shape.len() == rank {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: vec![0; rank],
                actual: self.shape.clone(),
            })
        }
    }
}

fn expect_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        })
    }
}

/// Weights, biases and their gradient accumulators for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        LayerParams {
            grad_weight: Tensor::zeros(weight.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            weight,
            bias,
        }
    }

    /// Uniform in +-1/sqrt(fan_in) for both weights and biases.
    pub fn init<R: Rng + ?Sized>(weight_shape: &[usize], bias_len: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Tensor::uniform(weight_shape, bound, rng);
        let bias = Tensor::uniform(&[bias_len], bound, rng);
        LayerParams::new(weight, bias)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(T::zero());
        self.grad_bias.fill(T::zero());
    }

    /// `w <- w - lr * grad`, then clears the gradients.
    pub fn sgd_step(&mut self, lr: T) {
        for (w, g) in self
            .weight
            .data
            .iter_mut()
            .zip(&self.grad_weight.data)
            .chain(self.bias.data.iter_mut().zip(&self.grad_bias.data))
        {
            *w -= lr * *g;
        }
        self.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        let conv = |t: &Tensor<T>| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| U::from(*v).unwrap()).collect(),
        };
        LayerParams::new(conv(&self.weight), conv(&self.bias))
    }
}

/// Which input gradient a backward pass should produce.
#[derive(Debug, Clone, Copy)]
pub enum InputGrad<'a> {
    Skip,
    Full,
    /// Only at these flat input indices; the rest of the returned tensor is 0.
    At(&'a [u32]),
}

/// Same-padded, stride-1 cross-correlation over `[N, C, H, W]` inputs.
#[derive(Debug, Clone)]
pub struct Conv2d<T = f32> {
    pub params: LayerParams<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let params = LayerParams::init(
            &[out_channels, in_channels, kernel, kernel],
            out_channels,
            in_channels * kernel * kernel,
            rng,
        );
        Conv2d::from_params(params).expect("shapes built consistently")
    }

    pub fn from_params(params: LayerParams<T>) -> Result<Self> {
        params.weight.expect_rank(4)?;
        let s = params.weight.shape().to_vec();
        if s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv kernel must be square and odd, got {s:?}")));
        }
        expect_shape(&[s[0]], params.bias.shape())?;
        Ok(Conv2d {
            in_channels: s[1],
            out_channels: s[0],
            kernel: s[2],
            params,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_rank(4)?;
        if x.shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![x.shape[0], self.in_channels, x.shape[2], x.shape[3]],
                actual: x.shape.clone(),
            });
        }
        Ok(())
    }

    /// Forward pass without caching. Sparse input planes are scattered
    /// pixel by pixel, dense ones are processed row by row.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (n, c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (o_n, k) = (self.out_channels, self.kernel);
        let wt = &self.params.weight.data;
        let mut out = Tensor::zeros(&[n, o_n, h, w]);
        let plane = h * w;
        for b in 0..n {
            let dst_all = &mut out.data[b * o_n * plane..][..o_n * plane];
            for o in 0..o_n {
                dst_all[o * plane..][..plane].fill(self.params.bias.data[o]);
            }
            for c in 0..c_in {
                let xin = &x.data[(b * c_in + c) * plane..][..plane];
                let sparse = is_sparse(xin);
                for o in 0..o_n {
                    let kw = &wt[(o * c_in + c) * k * k..][..k * k];
                    let dst = &mut dst_all[o * plane..][..plane];
                    if sparse {
                        scatter_plane(xin, kw, dst, h, w, k);
                    } else {
                        correlate_plane(xin, kw, dst, h, w, k);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// Pre-activation outputs of sample `b` at the given `(x, y)` pixels, as
    /// `positions.len()` rows of `out_channels` values. Every output is a
    /// fixed-order sum, so the same pixel always yields the same bits.
    pub fn forward_at(&self, x: &Tensor<T>, b: usize, positions: &[(usize, usize)]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let (c_in, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
        let k = self.kernel;
        let p = k / 2;
        let plane = h * w;
        let mut out = Vec::with_capacity(positions.len() * self.out_channels);
        for &(px, py) in positions {
            if px >= w || py >= h {
                return Err(Error::InvalidArgument(format!("pixel ({px}, {py}) outside {w}x{h}")));
            }
            for o in 0..self.out_channels {
                let mut acc = self.params.bias.data[o];
                for c in 0..c_in {
                    let xin = &x.data[(b * c_in + c) * plane..][..plane];
                    let kw = &self.params.weight.data[(o * c_in + c) * k * k..][..k * k];
                    for ky in 0..k {
                        let iy = (py + ky).wrapping_sub(p);
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (px + kx).wrapping_sub(p);
                            if ix >= w {
                                continue;
                            }
                            acc += kw[ky * k + kx] * xin[iy * w + ix];
                        }
                    }
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for the cached input and optionally
    /// returns the gradient with respect to that input.
    pub fn backward(&mut self, gout: &Tensor<T>, want: InputGrad<'_>) -> Result<Option<Tensor<T>>> {
        let x = self.cache.take().ok_or(Error::NoForwardCache)?;
        let (n, c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (o_n, k) = (self.out_channels, self.kernel);
        expect_shape(&[n, o_n, h, w], gout.shape())?;
        let p = k / 2;
        let plane = h * w;

        for b in 0..n {
            for o in 0..o_n {
                let g = &gout.data[(b * o_n + o) * plane..][..plane];
                let mut s = T::zero();
                for &v in g {
                    s += v;
                }
                self.params.grad_bias.data[o] += s;
            }
            let g_all = &gout.data[b * o_n * plane..][..o_n * plane];
            for c in 0..c_in {
                let xin = &x.data[(b * c_in + c) * plane..][..plane];
                let sparse = is_sparse(xin);
                for o in 0..o_n {
                    let g = &g_all[o * plane..][..plane];
                    let gw = &mut self.params.grad_weight.data[(o * c_in + c) * k * k..][..k * k];
                    if sparse {
                        for (i, &v) in xin.iter().enumerate() {
                            if v == T::zero() {
                                continue;
                            }
                            let (iy, ix) = (i / w, i % w);
                            let (ky0, ky1) = span(iy, p, k, h);
                            let (kx0, kx1) = span(ix, p, k, w);
                            let ox0 = ix + p - kx1;
                            for ky in ky0..=ky1 {
                                let grow = &g[(iy + p - ky) * w + ox0..][..kx1 - kx0 + 1];
                                let wrow = &mut gw[ky * k + kx0..=ky * k + kx1];
                                for (a, &gv) in wrow.iter_mut().zip(grow.iter().rev()) {
                                    *a += v * gv;
                                }
                            }
                        }
                    } else {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (oy0, oy1) = valid(ky, p, h);
                                let (ox0, ox1) = valid(kx, p, w);
                                let mut acc = T::zero();
                                for oy in oy0..oy1 {
                                    let iy = oy + ky - p;
                                    let grow = &g[oy * w + ox0..oy * w + ox1];
                                    let xrow = &xin[iy * w + ox0 + kx - p..][..ox1 - ox0];
                                    acc += dot(grow, xrow);
                                }
                                gw[ky * k + kx] += acc;
                            }
                        }
                    }
                }
            }
        }

        let mask = match want {
            InputGrad::Skip => return Ok(None),
            InputGrad::Full => None,
            InputGrad::At(idx) => Some(idx),
        };
        let weights = &self.params.weight.data;
        let mut gx = Tensor::zeros(&x.shape);
        for b in 0..n {
            for c in 0..c_in {
                let dst = &mut gx.data[(b * c_in + c) * plane..][..plane];
                for o in 0..o_n {
                    let g = &gout.data[(b * o_n + o) * plane..][..plane];
                    let kw = &weights[(o * c_in + c) * k * k..][..k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = kw[ky * k + kx];
                            let (oy0, oy1) = valid(ky, p, h);
                            let (ox0, ox1) = valid(kx, p, w);
                            for oy in oy0..oy1 {
                                let iy = oy + ky - p;
                                let grow = &g[oy * w + ox0..oy * w + ox1];
                                let drow = &mut dst[iy * w + ox0 + kx - p..][..ox1 - ox0];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(idx) = mask {
            let mut picked = Tensor::zeros(&x.shape);
            for &i in idx {
                let i = i as usize;
                if i >= picked.len() {
                    return Err(Error::InvalidArgument(format!("input index {i} out of range")));
                }
                picked.data[i] = gx.data[i];
            }
            gx = picked;
        }
        Ok(Some(gx))
    }
}

fn is_sparse<T: Real>(plane: &[T]) -> bool {
    plane.iter().filter(|&&v| v != T::zero()).count() * 8 < plane.len()
}

/// Output range `[lo, hi)` along one axis for which kernel offset `kk`
/// reads an input inside `[0, n)`.
#[inline]
fn valid(kk: usize, p: usize, n: usize) -> (usize, usize) {
    (p.saturating_sub(kk), (n + p).saturating_sub(kk).min(n))
}

fn scatter_plane<T: Real>(xin: &[T], kw: &[T], dst: &mut [T], h: usize, w: usize, k: usize) {
    let p = k / 2;
    for (i, &v) in xin.iter().enumerate() {
        if v == T::zero() {
            continue;
        }
        let (iy, ix) = (i / w, i % w);
        let (ky0, ky1) = span(iy, p, k, h);
        let (kx0, kx1) = span(ix, p, k, w);
        let ox0 = ix + p - kx1;
        for ky in ky0..=ky1 {
            let row = &mut dst[(iy + p - ky) * w + ox0..][..kx1 - kx0 + 1];
            let krow = &kw[ky * k + kx0..=ky * k + kx1];
            for (d, &kv) in row.iter_mut().zip(krow.iter().rev()) {
                *d += kv * v;
            }
        }
    }
}

fn correlate_plane<T: Real>(xin: &[T], kw: &[T], dst: &mut [T], h: usize, w: usize, k: usize) {
    let p = k / 2;
    for ky in 0..k {
        for kx in 0..k {
            let wv = kw[ky * k + kx];
            let (oy0, oy1) = valid(ky, p, h);
            let (ox0, ox1) = valid(kx, p, w);
            for oy in oy0..oy1 {
                let iy = oy + ky - p;
                let xrow = &xin[iy * w + ox0 + kx - p..][..ox1 - ox0];
                let drow = &mut dst[oy * w + ox0..oy * w + ox1];
                for (d, &xv) in drow.iter_mut().zip(xrow) {
                    *d += wv * xv;
                }
            }
        }
    }
}

/// Kernel offsets `kk` (inclusive range) for which input coordinate `i`
/// lands on output `i + p - kk` inside `[0, n)`.
#[inline]
fn span(i: usize, p: usize, k: usize, n: usize) -> (usize, usize) {
    ((i + p).saturating_sub(n - 1), (i + p).min(k - 1))
}

/// Dot product with eight independent accumulators so it vectorises.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += *x * *y;
    }
    let pairs = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    acc + ((pairs[0] + pairs[2]) + (pairs[1] + pairs[3]))
}

/// Fully connected layer over `[N, ...]` inputs flattened per sample.
#[derive(Debug, Clone)]
pub struct Dense<T = f32> {
    pub params: LayerParams<T>,
    inputs: usize,
    outputs: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let params = LayerParams::init(&[outputs, inputs], outputs, inputs, rng);
        Dense::from_params(params).expect("shapes built consistently")
    }

    pub fn from_params(params: LayerParams<T>) -> Result<Self> {
        params.weight.expect_rank(2)?;
        let (outputs, inputs) = (params.weight.shape[0], params.weight.shape[1]);
        expect_shape(&[outputs], params.bias.shape())?;
        Ok(Dense {
            params,
            inputs,
            outputs,
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape[0];
        if x.len() != n * self.inputs {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.inputs],
                actual: x.shape.clone(),
            });
        }
        let mut out = Tensor::zeros(&[n, self.outputs]);
        for o in 0..self.outputs {
            let wo = &self.params.weight.data[o * self.inputs..][..self.inputs];
            for b in 0..n {
                let xi = &x.data[b * self.inputs..][..self.inputs];
                out.data[b * self.outputs + o] = self.params.bias.data[o] + dot(wo, xi);
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gout: &Tensor<T>, want: InputGrad<'_>) -> Result<Option<Tensor<T>>> {
        let x = self.cache.take().ok_or(Error::NoForwardCache)?;
        let n = x.shape[0];
        expect_shape(&[n, self.outputs], gout.shape())?;
        for o in 0..self.outputs {
            let gw = &mut self.params.grad_weight.data[o * self.inputs..][..self.inputs];
            for b in 0..n {
                let xi = &x.data[b * self.inputs..][..self.inputs];
                let g = gout.data[b * self.outputs + o];
                self.params.grad_bias.data[o] += g;
                if g == T::zero() {
                    continue;
                }
                for (a, v) in gw.iter_mut().zip(xi) {
                    *a += g * *v;
                }
            }
        }
        if matches!(want, InputGrad::Skip) {
            return Ok(None);
        }
        let mut gx = Tensor::zeros(&x.shape);
        for o in 0..self.outputs {
            let wo = &self.params.weight.data[o * self.inputs..][..self.inputs];
            for b in 0..n {
                let g = gout.data[b * self.outputs + o];
                if g == T::zero() {
                    continue;
                }
                let gi = &mut gx.data[b * self.inputs..][..self.inputs];
                for (a, v) in gi.iter_mut().zip(wo) {
                    *a += g * *v;
                }
            }
        }
        if let InputGrad::At(idx) = want {
            let mut masked = Tensor::zeros(&x.shape);
            for &i in idx {
                masked.data[i as usize] = gx.data[i as usize];
            }
            gx = masked;
        }
        Ok(Some(gx))
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Runs of equal inputs (flat background) reuse the previous result.
pub fn sigmoid_inplace<T: Real>(t: &mut Tensor<T>) {
    let mut last_in = T::nan();
    let mut last_out = T::zero();
    for v in t.data.iter_mut() {
        if *v != last_in {
            last_in = *v;
            last_out = sigmoid(*v);
        }
        *v = last_out;
    }
}

/// Turns `grad` (w.r.t. the sigmoid output) into the gradient w.r.t. its
/// input, given the forward output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    expect_shape(y.shape(), grad.shape())?;
    for (g, &v) in grad.data.iter_mut().zip(&y.data) {
        *g *= v * (T::one() - v);
    }
    Ok(())
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    for v in t.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Turns `grad` (w.r.t. the ReLU output) into the gradient w.r.t. its
/// input, given the forward output `y`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    expect_shape(y.shape(), grad.shape())?;
    for (g, &v) in grad.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(())
}

/// Cuts `[N, C, H, W]` into non-overlapping `k x k` tiles, giving
/// `[N * (H/k) * (W/k), C * k * k]` with rows in sample, then row-major tile
/// order. A dense layer over the rows is a stride-`k` convolution.
pub fn tiles<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    x.expect_rank(4)?;
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidArgument(format!("{h}x{w} does not split into {k}x{k} tiles")));
    }
    let (th, tw) = (h / k, w / k);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ty in 0..th {
            for tx in 0..tw {
                for ch in 0..c {
                    let plane = &x.data[(b * c + ch) * h * w..][..h * w];
                    for dy in 0..k {
                        out.extend_from_slice(&plane[(ty * k + dy) * w + tx * k..][..k]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * th * tw, c * k * k], out)
}

/// Adam with the usual bias correction; one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(layers: &[&LayerParams<T>]) -> Self {
        let zeros = || layers.iter().map(|l| vec![T::zero(); l.param_count()]).collect::<Vec<_>>();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients, then clears them.
    pub fn step(&mut self, layers: &mut [&mut LayerParams<T>], lr: f64) {
        self.t += 1;
        let c = |x: f64| T::from(x).unwrap();
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let step = c(lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t)));
        let eps = c(self.eps);
        for ((layer, m), v) in layers.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let LayerParams {
                weight,
                bias,
                grad_weight,
                grad_bias,
            } = &mut **layer;
            let params = weight.data.iter_mut().chain(bias.data.iter_mut());
            let grads = grad_weight.data.iter().chain(&grad_bias.data);
            for (((p, &g), m), v) in params.zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
            layer.zero_grad();
        }
    }
}

/// 2x2 non-overlapping max pooling. Returns the pooled tensor and, per
/// output element, the flat index of the winning input element. Ties go to
/// the first element in raster order.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    x.expect_rank(4)?;
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![n, c, h & !1, w & !1],
            actual: x.shape.clone(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0u32; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2_backward<T: Real>(gout: &Tensor<T>, indices: &[u32], input_shape: &[usize]) -> Result<Tensor<T>> {
    upsample2(gout, indices, input_shape)
}

/// Unpooling: scatters each value to its recorded argmax position.
pub fn upsample2<T: Real>(x: &Tensor<T>, indices: &[u32], output_shape: &[usize]) -> Result<Tensor<T>> {
    if indices.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![indices.len()],
            actual: x.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(output_shape);
    if out.len() != 4 * x.len() {
        return Err(Error::ShapeMismatch {
            expected: output_shape.to_vec(),
            actual: x.shape.clone(),
        });
    }
    for (&i, &v) in indices.iter().zip(&x.data) {
        let slot = out
            .data
            .get_mut(i as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("unpool index {i} out of range")))?;
        *slot += v;
    }
    Ok(out)
}

pub fn upsample2_backward<T: Real>(gout: &Tensor<T>, indices: &[u32], pooled_shape: &[usize]) -> Result<Tensor<T>> {
    let data = indices
        .iter()
        .map(|&i| {
            gout.data
                .get(i as usize)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("unpool index {i} out of range")))
        })
        .collect::<Result<Vec<T>>>()?;
    Tensor::new(pooled_shape.to_vec(), data)
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    expect_shape(pred.shape(), target.shape())?;
    let n = pred.len() as f64;
    let k: T = lit(2.0 / n);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        loss += d.to_f64().unwrap().powi(2);
        *g = k * d;
    }
    Ok((loss / n, grad))
}

const MAGIC: &[u8; 8] = b"DSRLNN\x00\x01";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes layers as: magic, version, layer count, then per layer the weight
/// and bias shapes followed by their little-endian `f32` values.
pub fn write_params(w: &mut impl Write, layers: &[&LayerParams<f32>]) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, layers.len() as u32)?;
    for layer in layers {
        for t in [&layer.weight, &layer.bias] {
            put_u32(w, t.shape.len() as u32)?;
            for &d in &t.shape {
                put_u32(w, d as u32)?;
            }
        }
        for t in [&layer.weight, &layer.bias] {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<Vec<LayerParams<f32>>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("parameter file", "bad magic"));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::format("parameter file", format!("unsupported version {version}")));
    }
    let count = get_u32(r)? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let mut shapes = [Vec::new(), Vec::new()];
        for shape in &mut shapes {
            let rank = get_u32(r)? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::format("parameter file", format!("rank {rank}")));
            }
            for _ in 0..rank {
                shape.push(get_u32(r)? as usize);
            }
        }
        let mut tensors = Vec::with_capacity(2);
        for shape in shapes {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        let bias = tensors.pop().unwrap();
        let weight = tensors.pop().unwrap();
        layers.push(LayerParams::new(weight, bias));
    }
    Ok(layers)
}
