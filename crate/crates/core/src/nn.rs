//! Executable models built from layer graphs.
//!
//! A [`Model`] mirrors its [`LayerGraph`] node for node, so parameter
//! counting, freezing, and surgery all line up with what actually trains.
//! Forward passes record a [`Tape`] of per-layer outputs; the backward pass
//! walks the chain in reverse, routing gradients through residual adds and
//! skip concatenations the same way [`graph`](crate::graph) routes
//! activations. Gradients live next to their parameters; optimizers visit
//! them through [`Model::visit_trainable`].

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::graph::{HeadSpec, LayerGraph, LayerKind, PoolKind};
use crate::scalar::Float;
use crate::surgery::{FreezePlan, ModelPlan};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

fn he_normal<S: Float, R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<S> {
    let std = S::cast((2.0 / fan_in as f64).sqrt());
    (0..n).map(|_| S::standard_normal(rng) * std).collect()
}

/// Fully connected map, stored as (out, in).
#[derive(Clone, Debug)]
pub struct Dense<S: Float> {
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub gw: Array2<S>,
    pub gb: Array1<S>,
}

impl<S: Float> Dense<S> {
    pub fn new<R: Rng>(rng: &mut R, inp: usize, out: usize) -> Self {
        let w = Array2::from_shape_vec((out, inp), he_normal(rng, inp, out * inp)).unwrap();
        Dense {
            w,
            b: Array1::zeros(out),
            gw: Array2::zeros((out, inp)),
            gb: Array1::zeros(out),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Accumulates parameter grads, returns the input grad.
    pub fn backward(&mut self, x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
        self.gw += &dy.t().dot(x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

/// Convolution with zero padding. Weights are flattened to
/// (out, in * kh * kw) so the forward pass is one matrix product over the
/// whole batch.
#[derive(Clone, Debug)]
pub struct Conv2d<S: Float> {
    pub w: Array2<S>,
    pub b: Option<Array1<S>>,
    pub gw: Array2<S>,
    pub gb: Option<Array1<S>>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: (usize, usize),
    pub s: (usize, usize),
    pub p: (usize, usize),
}

impl<S: Float> Conv2d<S> {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
    ) -> Self {
        let cols = in_c * k.0 * k.1;
        let w = Array2::from_shape_vec((out_c, cols), he_normal(rng, cols, out_c * cols)).unwrap();
        Conv2d {
            w,
            b: bias.then(|| Array1::zeros(out_c)),
            gw: Array2::zeros((out_c, cols)),
            gb: bias.then(|| Array1::zeros(out_c)),
            in_c,
            out_c,
            k,
            s: stride,
            p: pad,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.p.0 - self.k.0) / self.s.0 + 1,
            (w + 2 * self.p.1 - self.k.1) / self.s.1 + 1,
        )
    }

    pub fn forward(&self, x: &Array4<S>) -> (Array4<S>, Array2<S>) {
        let (n, _, h, w) = dim4(x);
        let (oh, ow) = self.out_hw(h, w);
        let col = im2col(x, self.k, self.s, self.p, (oh, ow));
        let y2 = self.w.dot(&col);
        let mut y = Array4::zeros((n, self.out_c, oh, ow));
        {
            let spatial = oh * ow;
            let ys = y.as_slice_mut().unwrap();
            let y2s = y2.as_slice().unwrap();
            for b in 0..n {
                for o in 0..self.out_c {
                    let dst = (b * self.out_c + o) * spatial;
                    let src = o * n * spatial + b * spatial;
                    ys[dst..dst + spatial].copy_from_slice(&y2s[src..src + spatial]);
                }
            }
        }
        if let Some(bias) = &self.b {
            for o in 0..self.out_c {
                y.slice_mut(s![.., o, .., ..]).mapv_inplace(|v| v + bias[o]);
            }
        }
        (y, col)
    }

    pub fn backward(&mut self, col: &Array2<S>, dy: &Array4<S>, in_hw: (usize, usize)) -> Array4<S> {
        let (n, _, oh, ow) = dim4(dy);
        let spatial = oh * ow;
        let mut dy2 = Array2::zeros((self.out_c, n * spatial));
        {
            let src = dy.as_slice().unwrap();
            let dst = dy2.as_slice_mut().unwrap();
            for b in 0..n {
                for o in 0..self.out_c {
                    let from = (b * self.out_c + o) * spatial;
                    let to = o * n * spatial + b * spatial;
                    dst[to..to + spatial].copy_from_slice(&src[from..from + spatial]);
                }
            }
        }
        self.gw += &dy2.dot(&col.t());
        if let Some(gb) = &mut self.gb {
            *gb += &dy2.sum_axis(Axis(1));
        }
        let dcol = self.w.t().dot(&dy2);
        col2im(
            &dcol,
            (n, self.in_c, in_hw.0, in_hw.1),
            self.k,
            self.s,
            self.p,
            (oh, ow),
        )
    }
}

fn dim4<S>(x: &Array4<S>) -> (usize, usize, usize, usize) {
    let d = x.dim();
    (d.0, d.1, d.2, d.3)
}

/// Unfold to (C * kh * kw, N * OH * OW), zero-filled outside the image.
fn im2col<S: Float>(
    x: &Array4<S>,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array2<S> {
    let (n, c, h, w) = dim4(x);
    let (oh, ow) = out;
    let mut col = Array2::zeros((c * k.0 * k.1, n * oh * ow));
    let xs = x.as_slice().unwrap();
    let cs = col.as_slice_mut().unwrap();
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ki in 0..k.0 {
            for kj in 0..k.1 {
                let row = (ci * k.0 + ki) * k.1 + kj;
                let base = row * row_len;
                for b in 0..n {
                    let xbase = (b * c + ci) * h * w;
                    for oi in 0..oh {
                        let ih = oi * stride.0 + ki;
                        let dst0 = base + b * oh * ow + oi * ow;
                        if ih < pad.0 || ih >= h + pad.0 {
                            continue;
                        }
                        let ih = ih - pad.0;
                        for oj in 0..ow {
                            let iw = oj * stride.1 + kj;
                            if iw < pad.1 || iw >= w + pad.1 {
                                continue;
                            }
                            cs[dst0 + oj] = xs[xbase + ih * w + iw - pad.1];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the unfolded gradient back to image shape.
fn col2im<S: Float>(
    dcol: &Array2<S>,
    xdim: (usize, usize, usize, usize),
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array4<S> {
    let (n, c, h, w) = xdim;
    let (oh, ow) = out;
    let mut dx = Array4::zeros((n, c, h, w));
    let ds = dcol.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ki in 0..k.0 {
            for kj in 0..k.1 {
                let row = (ci * k.0 + ki) * k.1 + kj;
                let base = row * row_len;
                for b in 0..n {
                    let xbase = (b * c + ci) * h * w;
                    for oi in 0..oh {
                        let ih = oi * stride.0 + ki;
                        if ih < pad.0 || ih >= h + pad.0 {
                            continue;
                        }
                        let ih = ih - pad.0;
                        let src0 = base + b * oh * ow + oi * ow;
                        for oj in 0..ow {
                            let iw = oj * stride.1 + kj;
                            if iw < pad.1 || iw >= w + pad.1 {
                                continue;
                            }
                            xs[xbase + ih * w + iw - pad.1] += ds[src0 + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Batch normalization over (N, H, W) per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm<S: Float> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub ggamma: Array1<S>,
    pub gbeta: Array1<S>,
    pub run_mean: Array1<S>,
    pub run_var: Array1<S>,
}

pub struct BnCache<S: Float> {
    xhat: Array4<S>,
    invstd: Array1<S>,
}

impl<S: Float> BatchNorm<S> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            ggamma: Array1::zeros(c),
            gbeta: Array1::zeros(c),
            run_mean: Array1::zeros(c),
            run_var: Array1::ones(c),
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> (Array4<S>, Option<BnCache<S>>) {
        let (n, c, h, w) = dim4(x);
        let m = (n * h * w) as f64;
        let eps = S::cast(BN_EPS);
        if !train {
            let mut y = x.clone();
            for ci in 0..c {
                let scale = self.gamma[ci] / (self.run_var[ci] + eps).sqrt();
                let shift = self.beta[ci] - self.run_mean[ci] * scale;
                y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * scale + shift);
            }
            return (y, None);
        }
        let mut mean = Array1::<S>::zeros(c);
        let mut var = Array1::<S>::zeros(c);
        for ci in 0..c {
            let lane = x.slice(s![.., ci, .., ..]);
            let mu = lane.sum() / S::cast(m);
            let v = lane.iter().map(|&e| (e - mu) * (e - mu)).sum::<S>() / S::cast(m);
            mean[ci] = mu;
            var[ci] = v;
        }
        let mom = S::cast(BN_MOMENTUM);
        let unbias = S::cast(m / (m - 1.0).max(1.0));
        for ci in 0..c {
            self.run_mean[ci] = (S::one() - mom) * self.run_mean[ci] + mom * mean[ci];
            self.run_var[ci] = (S::one() - mom) * self.run_var[ci] + mom * var[ci] * unbias;
        }
        let mut xhat = x.clone();
        let mut invstd = Array1::<S>::zeros(c);
        for ci in 0..c {
            let istd = S::one() / (var[ci] + eps).sqrt();
            invstd[ci] = istd;
            let mu = mean[ci];
            xhat.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| (v - mu) * istd);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * g + b);
        }
        (y, Some(BnCache { xhat, invstd }))
    }

    pub fn backward(&mut self, cache: &BnCache<S>, dy: &Array4<S>) -> Array4<S> {
        let (n, c, h, w) = dim4(dy);
        let m = S::cast((n * h * w) as f64);
        let mut dx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let dy_l = dy.slice(s![.., ci, .., ..]);
            let xh_l = cache.xhat.slice(s![.., ci, .., ..]);
            let dg = dy_l.iter().zip(xh_l.iter()).map(|(&a, &b)| a * b).sum::<S>();
            let db = dy_l.sum();
            self.ggamma[ci] += dg;
            self.gbeta[ci] += db;
            let k = self.gamma[ci] * cache.invstd[ci] / m;
            let mut dx_l = dx.slice_mut(s![.., ci, .., ..]);
            ndarray::Zip::from(&mut dx_l).and(&dy_l).and(&xh_l).for_each(|o, &d, &xh| {
                *o = k * (m * d - xh * dg - db);
            });
        }
        dx
    }

    /// Evaluation-mode statistics folded to a per-channel affine map.
    pub fn eval_affine(&self, ci: usize) -> (S, S) {
        let eps = S::cast(BN_EPS);
        let scale = self.gamma[ci] / (self.run_var[ci] + eps).sqrt();
        (scale, self.beta[ci] - self.run_mean[ci] * scale)
    }
}

fn pool_out(h: usize, w: usize, k: (usize, usize), s: (usize, usize), p: (usize, usize)) -> (usize, usize) {
    ((h + 2 * p.0 - k.0) / s.0 + 1, (w + 2 * p.1 - k.1) / s.1 + 1)
}

fn maxpool_forward<S: Float>(
    x: &Array4<S>,
    k: (usize, usize),
    st: (usize, usize),
    p: (usize, usize),
) -> (Array4<S>, Array4<u32>) {
    let (n, c, h, w) = dim4(x);
    let (oh, ow) = pool_out(h, w, k, st, p);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut idx = Array4::<u32>::zeros((n, c, oh, ow));
    for b in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![b, ci, .., ..]);
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_at = 0u32;
                    for ki in 0..k.0 {
                        let ih = oi * st.0 + ki;
                        if ih < p.0 || ih >= h + p.0 {
                            continue;
                        }
                        let ih = ih - p.0;
                        for kj in 0..k.1 {
                            let iw = oj * st.1 + kj;
                            if iw < p.1 || iw >= w + p.1 {
                                continue;
                            }
                            let iw = iw - p.1;
                            let v = plane[(ih, iw)];
                            if v > best {
                                best = v;
                                best_at = (ih * w + iw) as u32;
                            }
                        }
                    }
                    y[(b, ci, oi, oj)] = best;
                    idx[(b, ci, oi, oj)] = best_at;
                }
            }
        }
    }
    (y, idx)
}

fn maxpool_backward<S: Float>(
    idx: &Array4<u32>,
    dy: &Array4<S>,
    xdim: (usize, usize, usize, usize),
) -> Array4<S> {
    let (n, c, h, w) = xdim;
    let mut dx = Array4::zeros((n, c, h, w));
    let (_, _, oh, ow) = dim4(dy);
    for b in 0..n {
        for ci in 0..c {
            let mut plane = dx.slice_mut(s![b, ci, .., ..]);
            for oi in 0..oh {
                for oj in 0..ow {
                    let at = idx[(b, ci, oi, oj)] as usize;
                    plane[(at / w, at % w)] += dy[(b, ci, oi, oj)];
                }
            }
        }
    }
    dx
}

fn avgpool_forward<S: Float>(
    x: &Array4<S>,
    k: (usize, usize),
    st: (usize, usize),
    p: (usize, usize),
) -> Array4<S> {
    let (n, c, h, w) = dim4(x);
    let (oh, ow) = pool_out(h, w, k, st, p);
    let mut y = Array4::zeros((n, c, oh, ow));
    let area = S::cast((k.0 * k.1) as f64);
    for b in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![b, ci, .., ..]);
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = S::zero();
                    for ki in 0..k.0 {
                        let ih = oi * st.0 + ki;
                        if ih < p.0 || ih >= h + p.0 {
                            continue;
                        }
                        for kj in 0..k.1 {
                            let iw = oj * st.1 + kj;
                            if iw < p.1 || iw >= w + p.1 {
                                continue;
                            }
                            acc += plane[(ih - p.0, iw - p.1)];
                        }
                    }
                    y[(b, ci, oi, oj)] = acc / area;
                }
            }
        }
    }
    y
}

fn avgpool_backward<S: Float>(
    dy: &Array4<S>,
    xdim: (usize, usize, usize, usize),
    k: (usize, usize),
    st: (usize, usize),
    p: (usize, usize),
) -> Array4<S> {
    let (n, c, h, w) = xdim;
    let (_, _, oh, ow) = dim4(dy);
    let mut dx = Array4::zeros((n, c, h, w));
    let area = S::cast((k.0 * k.1) as f64);
    for b in 0..n {
        for ci in 0..c {
            let mut plane = dx.slice_mut(s![b, ci, .., ..]);
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = dy[(b, ci, oi, oj)] / area;
                    for ki in 0..k.0 {
                        let ih = oi * st.0 + ki;
                        if ih < p.0 || ih >= h + p.0 {
                            continue;
                        }
                        for kj in 0..k.1 {
                            let iw = oj * st.1 + kj;
                            if iw < p.1 || iw >= w + p.1 {
                                continue;
                            }
                            plane[(ih - p.0, iw - p.1)] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn upsample_forward<S: Float>(x: &Array4<S>, scale: (usize, usize)) -> Array4<S> {
    let (n, c, h, w) = dim4(x);
    let mut y = Array4::zeros((n, c, h * scale.0, w * scale.1));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..h * scale.0 {
                for j in 0..w * scale.1 {
                    y[(b, ci, i, j)] = x[(b, ci, i / scale.0, j / scale.1)];
                }
            }
        }
    }
    y
}

fn upsample_backward<S: Float>(dy: &Array4<S>, scale: (usize, usize)) -> Array4<S> {
    let (n, c, oh, ow) = dim4(dy);
    let (h, w) = (oh / scale.0, ow / scale.1);
    let mut dx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    dx[(b, ci, i / scale.0, j / scale.1)] += dy[(b, ci, i, j)];
                }
            }
        }
    }
    dx
}

/// Runtime op for one graph node.
pub enum LayerOp<S: Float> {
    Conv(Conv2d<S>),
    Norm(BatchNorm<S>),
    Relu,
    Pool {
        max: bool,
        k: (usize, usize),
        s: (usize, usize),
        p: (usize, usize),
    },
    Upsample {
        scale: (usize, usize),
    },
    Concat,
    Linear(Dense<S>),
}

/// Per-layer forward state needed by the backward pass.
pub enum OpCache<S: Float> {
    None,
    Col(Array2<S>),
    Bn(BnCache<S>),
    Pool(Array4<u32>),
}

/// Classification head: global average pooling into one or two dense maps.
pub struct Head<S: Float> {
    pub fc1: Option<Dense<S>>,
    pub fc2: Dense<S>,
}

pub struct HeadCache<S: Float> {
    pooled: Array2<S>,
    hidden: Option<(Array2<S>, Array2<S>)>,
    hw: (usize, usize),
}

impl<S: Float> Head<S> {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, spec: &HeadSpec) -> Self {
        match spec.hidden {
            Some(h) => Head {
                fc1: Some(Dense::new(rng, in_c, h)),
                fc2: Dense::new(rng, h, spec.classes),
            },
            None => Head {
                fc1: None,
                fc2: Dense::new(rng, in_c, spec.classes),
            },
        }
    }

    pub fn forward(&self, x: &Array4<S>) -> (Array2<S>, HeadCache<S>) {
        let (n, c, h, w) = dim4(x);
        let inv = S::cast(1.0 / (h * w) as f64);
        let mut pooled = Array2::zeros((n, c));
        for b in 0..n {
            for ci in 0..c {
                pooled[(b, ci)] = x.slice(s![b, ci, .., ..]).sum() * inv;
            }
        }
        match &self.fc1 {
            Some(fc1) => {
                let pre = fc1.forward(&pooled);
                let post = pre.mapv(|v| v.max(S::zero()));
                let logits = self.fc2.forward(&post);
                (
                    logits,
                    HeadCache {
                        pooled,
                        hidden: Some((pre, post)),
                        hw: (h, w),
                    },
                )
            }
            None => {
                let logits = self.fc2.forward(&pooled);
                (
                    logits,
                    HeadCache {
                        pooled,
                        hidden: None,
                        hw: (h, w),
                    },
                )
            }
        }
    }

    pub fn backward(&mut self, cache: &HeadCache<S>, dlogits: &Array2<S>) -> Array4<S> {
        let dpooled = match (&mut self.fc1, &cache.hidden) {
            (Some(fc1), Some((pre, post))) => {
                let dpost = self.fc2.backward(post, dlogits);
                let dpre = ndarray::Zip::from(&dpost)
                    .and(pre)
                    .map_collect(|&g, &v| if v > S::zero() { g } else { S::zero() });
                fc1.backward(&cache.pooled, &dpre)
            }
            _ => self.fc2.backward(&cache.pooled, dlogits),
        };
        let (n, c) = dpooled.dim();
        let (h, w) = cache.hw;
        let inv = S::cast(1.0 / (h * w) as f64);
        let mut dx = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ci in 0..c {
                let g = dpooled[(b, ci)] * inv;
                dx.slice_mut(s![b, ci, .., ..]).fill(g);
            }
        }
        dx
    }
}

/// Forward record: the network input followed by every layer output, plus
/// per-layer caches.
pub struct Tape<S: Float> {
    pub outputs: Vec<Array4<S>>,
    caches: Vec<OpCache<S>>,
    head: Option<HeadCache<S>>,
}

/// Identifies one parameter tensor for optimizer state.
pub type ParamId = u64;

/// Executable network: ops aligned with `graph.layers`, plus an optional
/// classification head and the freeze plan that governs training.
pub struct Model<S: Float> {
    pub graph: LayerGraph,
    pub ops: Vec<LayerOp<S>>,
    pub head: Option<Head<S>>,
    pub freeze: FreezePlan,
    first_trainable: usize,
}

impl<S: Float> Model<S> {
    /// Build a freshly initialized model from a surgery plan.
    pub fn from_plan(plan: &ModelPlan, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = plan.graph.clone();
        graph.validate()?;
        let mut ops = Vec::with_capacity(graph.len());
        for node in &graph.layers {
            if node.groups != 1 {
                return Err(Error::InvalidLayer {
                    layer: node.name.clone(),
                    reason: "grouped convolutions are countable but not executable".into(),
                });
            }
            let op = match node.kind {
                LayerKind::Conv => LayerOp::Conv(Conv2d::new(
                    &mut rng,
                    node.in_channels,
                    node.out_channels,
                    node.kernel.unwrap_or((1, 1)),
                    node.stride,
                    node.padding,
                    node.bias,
                )),
                LayerKind::Norm => LayerOp::Norm(BatchNorm::new(node.out_channels)),
                LayerKind::Activation => LayerOp::Relu,
                LayerKind::Pool => LayerOp::Pool {
                    max: node.pool_kind != Some(PoolKind::Avg),
                    k: node.kernel.unwrap_or((2, 2)),
                    s: node.stride,
                    p: node.padding,
                },
                LayerKind::Upsample => LayerOp::Upsample {
                    scale: node.kernel.unwrap_or((2, 2)),
                },
                LayerKind::Concat => LayerOp::Concat,
                LayerKind::Linear => LayerOp::Linear(Dense::new(
                    &mut rng,
                    node.in_channels,
                    node.out_channels,
                )),
            };
            ops.push(op);
        }
        let head = match &plan.head {
            Some(spec) => {
                let in_c = graph.layers.last().unwrap().out_channels;
                Some(Head::new(&mut rng, in_c, spec))
            }
            None => None,
        };
        let freeze = plan.freeze.clone();
        let first_trainable = first_trainable_layer(&freeze);
        Ok(Model {
            graph,
            ops,
            head,
            freeze,
            first_trainable,
        })
    }

    /// Copy every same-named, same-shaped tensor from `src`; layers beyond
    /// `fresh_above` keep their fresh initialization.
    pub fn transfer_from(&mut self, src: &Model<S>, fresh_above: usize) {
        let index: HashMap<&str, usize> = src
            .graph
            .layers
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        for (i, node) in self.graph.layers.iter().enumerate() {
            if i + 1 > fresh_above {
                continue;
            }
            let Some(&j) = index.get(node.name.as_str()) else {
                continue;
            };
            match (&mut self.ops[i], &src.ops[j]) {
                (LayerOp::Conv(dst), LayerOp::Conv(s0)) if dst.w.dim() == s0.w.dim() => {
                    dst.w.assign(&s0.w);
                    if let (Some(db), Some(sb)) = (&mut dst.b, &s0.b) {
                        db.assign(sb);
                    }
                }
                (LayerOp::Norm(dst), LayerOp::Norm(s0)) if dst.gamma.len() == s0.gamma.len() => {
                    dst.gamma.assign(&s0.gamma);
                    dst.beta.assign(&s0.beta);
                    dst.run_mean.assign(&s0.run_mean);
                    dst.run_var.assign(&s0.run_var);
                }
                (LayerOp::Linear(dst), LayerOp::Linear(s0)) if dst.w.dim() == s0.w.dim() => {
                    dst.w.assign(&s0.w);
                    dst.b.assign(&s0.b);
                }
                _ => {}
            }
        }
    }

    fn layer_input(&self, i: usize, tape: &Tape<S>) -> Array4<S> {
        let node = &self.graph.layers[i];
        let chain = match node.input_from {
            Some(src) => &tape.outputs[src],
            None => &tape.outputs[i],
        };
        let mut x = match node.add_from {
            Some(src) => chain + &tape.outputs[src],
            None => chain.clone(),
        };
        if node.kind == LayerKind::Concat {
            let lateral = &tape.outputs[node.skip_from.unwrap()];
            let (n, c1, h, w) = dim4(&x);
            let c2 = lateral.dim().1;
            let mut cat = Array4::zeros((n, c1 + c2, h, w));
            cat.slice_mut(s![.., ..c1, .., ..]).assign(&x);
            cat.slice_mut(s![.., c1.., .., ..]).assign(lateral);
            x = cat;
        }
        x
    }

    /// Run the backbone, returning logits (or pooled features if headless)
    /// and the tape. `train` enables batch statistics and their updates in
    /// unfrozen norm layers.
    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> (Array2<S>, Tape<S>) {
        let mut tape = Tape {
            outputs: vec![x.clone()],
            caches: Vec::with_capacity(self.ops.len()),
            head: None,
        };
        for i in 0..self.ops.len() {
            let input = self.layer_input(i, &tape);
            let bn_train = train && !self.freeze.is_frozen(i);
            let (out, cache) = match &mut self.ops[i] {
                LayerOp::Conv(conv) => {
                    let (y, col) = conv.forward(&input);
                    (y, if train { OpCache::Col(col) } else { OpCache::None })
                }
                LayerOp::Norm(bn) => {
                    let (y, c) = bn.forward(&input, bn_train);
                    (y, c.map(OpCache::Bn).unwrap_or(OpCache::None))
                }
                LayerOp::Relu => (input.mapv(|v| v.max(S::zero())), OpCache::None),
                LayerOp::Pool { max, k, s, p } => {
                    if *max {
                        let (y, idx) = maxpool_forward(&input, *k, *s, *p);
                        (y, if train { OpCache::Pool(idx) } else { OpCache::None })
                    } else {
                        (avgpool_forward(&input, *k, *s, *p), OpCache::None)
                    }
                }
                LayerOp::Upsample { scale } => (upsample_forward(&input, *scale), OpCache::None),
                LayerOp::Concat => (input, OpCache::None),
                LayerOp::Linear(dense) => {
                    let (n, c, h, w) = dim4(&input);
                    let flat = input.to_shape((n, c * h * w)).unwrap().to_owned();
                    let y = dense.forward(&flat);
                    let out_c = y.dim().1;
                    (y.into_shape_with_order((n, out_c, 1, 1)).unwrap(), OpCache::None)
                }
            };
            tape.outputs.push(out);
            tape.caches.push(cache);
        }
        let last = tape.outputs.last().unwrap();
        let logits = match &self.head {
            Some(head) => {
                let (logits, hc) = head.forward(last);
                tape.head = Some(hc);
                logits
            }
            None => {
                let (n, c, h, w) = dim4(last);
                let inv = S::cast(1.0 / (h * w) as f64);
                let mut pooled = Array2::zeros((n, c));
                for b in 0..n {
                    for ci in 0..c {
                        pooled[(b, ci)] = last.slice(s![b, ci, .., ..]).sum() * inv;
                    }
                }
                pooled
            }
        };
        (logits, tape)
    }

    /// Evaluation-mode logits without gradient bookkeeping.
    pub fn infer(&mut self, x: &Array4<S>) -> Array2<S> {
        self.forward(x, false).0
    }

    /// Evaluation-mode output of backbone layer `upto` (1-based).
    pub fn features(&mut self, x: &Array4<S>, upto: usize) -> Result<Array4<S>> {
        if upto == 0 || upto > self.ops.len() {
            return Err(Error::InvalidCutoff {
                cutoff: upto,
                len: self.ops.len(),
            });
        }
        let mut tape = Tape {
            outputs: vec![x.clone()],
            caches: Vec::new(),
            head: None,
        };
        for i in 0..upto {
            let input = self.layer_input(i, &tape);
            let out = match &mut self.ops[i] {
                LayerOp::Conv(conv) => conv.forward(&input).0,
                LayerOp::Norm(bn) => bn.forward(&input, false).0,
                LayerOp::Relu => input.mapv(|v| v.max(S::zero())),
                LayerOp::Pool { max, k, s, p } => {
                    if *max {
                        maxpool_forward(&input, *k, *s, *p).0
                    } else {
                        avgpool_forward(&input, *k, *s, *p)
                    }
                }
                LayerOp::Upsample { scale } => upsample_forward(&input, *scale),
                LayerOp::Concat => input,
                LayerOp::Linear(dense) => {
                    let (n, c, _, _) = dim4(&input);
                    let flat = input.to_shape((n, c)).unwrap().to_owned();
                    let y = dense.forward(&flat);
                    let out_c = y.dim().1;
                    y.into_shape_with_order((n, out_c, 1, 1)).unwrap()
                }
            };
            tape.outputs.push(out);
            tape.caches.push(OpCache::None);
        }
        Ok(tape.outputs.pop().unwrap())
    }

    /// Backpropagate from the logits gradient, accumulating parameter grads.
    pub fn backward(&mut self, tape: &Tape<S>, dlogits: &Array2<S>) {
        let len = self.ops.len();
        let mut grads: Vec<Option<Array4<S>>> = vec![None; len + 1];
        let dlast = match (&mut self.head, &tape.head) {
            (Some(head), Some(hc)) => head.backward(hc, dlogits),
            _ => {
                let last = tape.outputs.last().unwrap();
                let (n, c, h, w) = dim4(last);
                let inv = S::cast(1.0 / (h * w) as f64);
                let mut dx = Array4::zeros((n, c, h, w));
                for b in 0..n {
                    for ci in 0..c {
                        dx.slice_mut(s![b, ci, .., ..]).fill(dlogits[(b, ci)] * inv);
                    }
                }
                dx
            }
        };
        grads[len] = Some(dlast);
        // Gradients below the shallowest trainable layer are never used.
        let stop = self.first_trainable;
        for i in (stop.saturating_sub(1)..len).rev() {
            let Some(dy) = grads[i + 1].take() else {
                continue;
            };
            let node = &self.graph.layers[i];
            // True input dims: spatial from the chain, channels from the
            // node (concat widens the channel count).
            let in_dim = {
                let chain = match node.input_from {
                    Some(src) => &tape.outputs[src],
                    None => &tape.outputs[i],
                };
                let d = dim4(chain);
                (d.0, node.in_channels, d.2, d.3)
            };
            let mut din = match &mut self.ops[i] {
                LayerOp::Conv(conv) => {
                    let OpCache::Col(col) = &tape.caches[i] else {
                        panic!("conv backward without a forward cache");
                    };
                    conv.backward(col, &dy, (in_dim.2, in_dim.3))
                }
                LayerOp::Norm(bn) => match &tape.caches[i] {
                    OpCache::Bn(c) => bn.backward(c, &dy),
                    // Frozen norm layers are affine maps with fixed stats.
                    _ => {
                        let mut dx = dy.clone();
                        for ci in 0..dx.dim().1 {
                            let (scale, _) = bn.eval_affine(ci);
                            dx.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * scale);
                        }
                        dx
                    }
                },
                LayerOp::Relu => {
                    let out = &tape.outputs[i + 1];
                    ndarray::Zip::from(&dy)
                        .and(out)
                        .map_collect(|&g, &y| if y > S::zero() { g } else { S::zero() })
                }
                LayerOp::Pool { max, k, s, p } => {
                    if *max {
                        let OpCache::Pool(idx) = &tape.caches[i] else {
                            panic!("maxpool backward without a forward cache");
                        };
                        maxpool_backward(idx, &dy, in_dim)
                    } else {
                        avgpool_backward(&dy, in_dim, *k, *s, *p)
                    }
                }
                LayerOp::Upsample { scale } => upsample_backward(&dy, *scale),
                LayerOp::Concat => dy,
                LayerOp::Linear(dense) => {
                    let (n, c, _, _) = in_dim;
                    let flat = tape.outputs[i]
                        .to_shape((n, c))
                        .unwrap()
                        .to_owned();
                    let dy2 = dy.to_shape((n, dy.dim().1)).unwrap().to_owned();
                    let dx = dense.backward(&flat, &dy2);
                    dx.into_shape_with_order((n, c, 1, 1)).unwrap()
                }
            };
            // Split off the lateral part of a concat before routing.
            if node.kind == LayerKind::Concat {
                let lateral_src = node.skip_from.unwrap();
                let c2 = self.graph.layers[lateral_src - 1].out_channels;
                let c1 = din.dim().1 - c2;
                let d_lat = din.slice(s![.., c1.., .., ..]).to_owned();
                accumulate(&mut grads[lateral_src], d_lat);
                din = din.slice(s![.., ..c1, .., ..]).to_owned();
            }
            if let Some(src) = node.add_from {
                accumulate(&mut grads[src], din.clone());
            }
            let chain_dst = node.input_from.unwrap_or(i);
            accumulate(&mut grads[chain_dst], din);
        }
    }

    pub fn zero_grads(&mut self) {
        self.fill_grads(S::zero());
    }

    /// Set every gradient buffer to `v`. A fixed nonzero gradient makes the
    /// per-tensor learning-rate tiers directly observable after one SGD step.
    pub fn fill_grads(&mut self, v: S) {
        for op in &mut self.ops {
            match op {
                LayerOp::Conv(c) => {
                    c.gw.fill(v);
                    if let Some(gb) = &mut c.gb {
                        gb.fill(v);
                    }
                }
                LayerOp::Norm(bn) => {
                    bn.ggamma.fill(v);
                    bn.gbeta.fill(v);
                }
                LayerOp::Linear(d) => {
                    d.gw.fill(v);
                    d.gb.fill(v);
                }
                _ => {}
            }
        }
        if let Some(head) = &mut self.head {
            if let Some(fc1) = &mut head.fc1 {
                fc1.gw.fill(v);
                fc1.gb.fill(v);
            }
            head.fc2.gw.fill(v);
            head.fc2.gb.fill(v);
        }
    }

    /// Visit every trainable tensor with its freeze-plan scale.
    pub fn visit_trainable<F>(&mut self, mut f: F)
    where
        F: FnMut(ParamId, &mut [S], &[S], f64),
    {
        let freeze = self.freeze.clone();
        for (i, op) in self.ops.iter_mut().enumerate() {
            let scale = freeze.layer_scale[i];
            if scale == 0.0 {
                continue;
            }
            let base = (i as u64) << 3;
            match op {
                LayerOp::Conv(c) => {
                    f(base, c.w.as_slice_mut().unwrap(), c.gw.as_slice().unwrap(), scale);
                    if let (Some(b), Some(gb)) = (&mut c.b, &c.gb) {
                        f(base | 1, b.as_slice_mut().unwrap(), gb.as_slice().unwrap(), scale);
                    }
                }
                LayerOp::Norm(bn) => {
                    f(
                        base | 2,
                        bn.gamma.as_slice_mut().unwrap(),
                        bn.ggamma.as_slice().unwrap(),
                        scale,
                    );
                    f(
                        base | 3,
                        bn.beta.as_slice_mut().unwrap(),
                        bn.gbeta.as_slice().unwrap(),
                        scale,
                    );
                }
                LayerOp::Linear(d) => {
                    f(base, d.w.as_slice_mut().unwrap(), d.gw.as_slice().unwrap(), scale);
                    f(base | 1, d.b.as_slice_mut().unwrap(), d.gb.as_slice().unwrap(), scale);
                }
                _ => {}
            }
        }
        if let Some(head) = &mut self.head {
            let scale = freeze.head_scale;
            if scale == 0.0 {
                return;
            }
            let base = (self.ops.len() as u64) << 3;
            if let Some(fc1) = &mut head.fc1 {
                f(base, fc1.w.as_slice_mut().unwrap(), fc1.gw.as_slice().unwrap(), scale);
                f(base | 1, fc1.b.as_slice_mut().unwrap(), fc1.gb.as_slice().unwrap(), scale);
            }
            f(
                base | 2,
                head.fc2.w.as_slice_mut().unwrap(),
                head.fc2.gw.as_slice().unwrap(),
                scale,
            );
            f(
                base | 3,
                head.fc2.b.as_slice_mut().unwrap(),
                head.fc2.gb.as_slice().unwrap(),
                scale,
            );
        }
    }

    /// Largest effective learning-rate scale among trainable tensors.
    pub fn max_scale(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, _) in self.ops.iter().enumerate() {
            best = best.max(self.freeze.layer_scale[i]);
        }
        if self.head.is_some() {
            best = best.max(self.freeze.head_scale);
        }
        best
    }

    /// Flat name-keyed view of all weights, used by checkpoints and tests.
    pub fn state_dict(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = Vec::new();
        for (node, op) in self.graph.layers.iter().zip(&self.ops) {
            let name = &node.name;
            match op {
                LayerOp::Conv(c) => {
                    out.push((format!("{name}.w"), c.w.shape().to_vec(), c.w.iter().cloned().collect()));
                    if let Some(b) = &c.b {
                        out.push((format!("{name}.b"), vec![b.len()], b.to_vec()));
                    }
                }
                LayerOp::Norm(bn) => {
                    out.push((format!("{name}.gamma"), vec![bn.gamma.len()], bn.gamma.to_vec()));
                    out.push((format!("{name}.beta"), vec![bn.beta.len()], bn.beta.to_vec()));
                    out.push((
                        format!("{name}.running_mean"),
                        vec![bn.run_mean.len()],
                        bn.run_mean.to_vec(),
                    ));
                    out.push((
                        format!("{name}.running_var"),
                        vec![bn.run_var.len()],
                        bn.run_var.to_vec(),
                    ));
                }
                LayerOp::Linear(d) => {
                    out.push((format!("{name}.w"), d.w.shape().to_vec(), d.w.iter().cloned().collect()));
                    out.push((format!("{name}.b"), vec![d.b.len()], d.b.to_vec()));
                }
                _ => {}
            }
        }
        if let Some(head) = &self.head {
            if let Some(fc1) = &head.fc1 {
                out.push(("head.fc1.w".into(), fc1.w.shape().to_vec(), fc1.w.iter().cloned().collect()));
                out.push(("head.fc1.b".into(), vec![fc1.b.len()], fc1.b.to_vec()));
            }
            out.push(("head.fc2.w".into(), head.fc2.w.shape().to_vec(), head.fc2.w.iter().cloned().collect()));
            out.push(("head.fc2.b".into(), vec![head.fc2.b.len()], head.fc2.b.to_vec()));
        }
        out
    }

    /// Load tensors by name; shapes must match exactly.
    pub fn load_state_dict(&mut self, entries: &[(String, Vec<usize>, Vec<S>)]) -> Result<()> {
        let map: HashMap<&str, (&Vec<usize>, &Vec<S>)> = entries
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        let set = |name: &str, want: &[usize], dst: &mut [S]| -> Result<()> {
            let (shape, data) = map.get(name).ok_or_else(|| Error::UnknownLayer {
                name: name.to_string(),
            })?;
            if shape.as_slice() != want {
                return Err(Error::ShapeMismatch {
                    expected: format!("{want:?} for {name}"),
                    got: format!("{shape:?}"),
                });
            }
            dst.copy_from_slice(data);
            Ok(())
        };
        for (node, op) in self.graph.layers.iter().zip(&mut self.ops) {
            let name = &node.name;
            match op {
                LayerOp::Conv(c) => {
                    let dims = c.w.shape().to_vec();
                    set(&format!("{name}.w"), &dims, c.w.as_slice_mut().unwrap())?;
                    if let Some(b) = &mut c.b {
                        let dims = vec![b.len()];
                        set(&format!("{name}.b"), &dims, b.as_slice_mut().unwrap())?;
                    }
                }
                LayerOp::Norm(bn) => {
                    let dims = vec![bn.gamma.len()];
                    set(&format!("{name}.gamma"), &dims, bn.gamma.as_slice_mut().unwrap())?;
                    set(&format!("{name}.beta"), &dims, bn.beta.as_slice_mut().unwrap())?;
                    set(
                        &format!("{name}.running_mean"),
                        &dims,
                        bn.run_mean.as_slice_mut().unwrap(),
                    )?;
                    set(
                        &format!("{name}.running_var"),
                        &dims,
                        bn.run_var.as_slice_mut().unwrap(),
                    )?;
                }
                LayerOp::Linear(d) => {
                    let dims = d.w.shape().to_vec();
                    set(&format!("{name}.w"), &dims, d.w.as_slice_mut().unwrap())?;
                    let dims = vec![d.b.len()];
                    set(&format!("{name}.b"), &dims, d.b.as_slice_mut().unwrap())?;
                }
                _ => {}
            }
        }
        if let Some(head) = &mut self.head {
            if let Some(fc1) = &mut head.fc1 {
                let dims = fc1.w.shape().to_vec();
                set("head.fc1.w", &dims, fc1.w.as_slice_mut().unwrap())?;
                let dims = vec![fc1.b.len()];
                set("head.fc1.b", &dims, fc1.b.as_slice_mut().unwrap())?;
            }
            let dims = head.fc2.w.shape().to_vec();
            set("head.fc2.w", &dims, head.fc2.w.as_slice_mut().unwrap())?;
            let dims = vec![head.fc2.b.len()];
            set("head.fc2.b", &dims, head.fc2.b.as_slice_mut().unwrap())?;
        }
        Ok(())
    }
}

fn first_trainable_layer(freeze: &FreezePlan) -> usize {
    freeze
        .layer_scale
        .iter()
        .position(|&s| s > 0.0)
        .map(|i| i + 1)
        .unwrap_or(freeze.layer_scale.len() + 1)
}

fn accumulate<S: Float>(slot: &mut Option<Array4<S>>, g: Array4<S>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Mean softmax cross-entropy; returns the loss and the logits gradient.
pub fn softmax_cross_entropy<S: Float>(logits: &Array2<S>, labels: &[usize]) -> (f64, Array2<S>) {
    let (n, _c) = logits.dim();
    assert_eq!(n, labels.len(), "one label per row");
    let probs = softmax(logits);
    let mut loss = 0.0f64;
    let mut grad = probs.clone();
    for (b, &y) in labels.iter().enumerate() {
        loss -= probs[(b, y)].as_f64().max(1e-300).ln();
        grad[(b, y)] -= S::one();
    }
    let inv = S::cast(1.0 / n as f64);
    grad.mapv_inplace(|v| v * inv);
    (loss / n as f64, grad)
}

pub fn softmax<S: Float>(logits: &Array2<S>) -> Array2<S> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Probability of class 1, the conventional positive-class score.
pub fn positive_scores<S: Float>(logits: &Array2<S>) -> Vec<f64> {
    softmax(logits).column(1).iter().map(|v| v.as_f64()).collect()
}

/// ADAM with optimizer state keyed per tensor. The effective step size is
/// `lr * tensor scale * factor`, where `factor` is the schedule's knob.
pub struct Adam<S: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: HashMap<ParamId, (Vec<S>, Vec<S>)>,
}

impl<S: Float> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// One update over every trainable tensor of `model`.
    pub fn step(&mut self, model: &mut Model<S>, factor: f64) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let base = self.lr;
        let eps = self.eps;
        let state = &mut self.state;
        model.visit_trainable(|id, w, g, scale| {
            let (m, v) = state
                .entry(id)
                .or_insert_with(|| (vec![S::zero(); w.len()], vec![S::zero(); w.len()]));
            let lr = S::cast(base * scale * factor);
            let b1s = S::cast(b1);
            let b2s = S::cast(b2);
            let one = S::one();
            let epss = S::cast(eps);
            let c1 = S::cast(1.0 / bias1);
            let c2 = S::cast(1.0 / bias2);
            for i in 0..w.len() {
                m[i] = b1s * m[i] + (one - b1s) * g[i];
                v[i] = b2s * v[i] + (one - b2s) * g[i] * g[i];
                let mhat = m[i] * c1;
                let vhat = v[i] * c2;
                w[i] = w[i] - lr * mhat / (vhat.sqrt() + epss);
            }
        });
    }
}

/// Plain SGD; the update is exactly `w -= lr * scale * factor * g`, which
/// makes relative learning rates directly observable.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step<S: Float>(&mut self, model: &mut Model<S>, factor: f64) {
        let base = self.lr;
        model.visit_trainable(|_, w, g, scale| {
            let lr = S::cast(base * scale * factor);
            for i in 0..w.len() {
                w[i] = w[i] - lr * g[i];
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::surgery::{build_ftl, build_lwft};
    use crate::zoo;
    use approx::assert_abs_diff_eq;

    fn tiny_resnet() -> crate::graph::LayerGraph {
        let mut b = GraphBuilder::new("t", (2, 6, 6));
        b.conv("c0", 3, 3, 1, 1, true);
        b.norm("n0");
        b.act("r0");
        let entry = b.here();
        b.begin_span();
        b.conv("u.c1", 3, 3, 1, 1, false);
        b.norm("u.n1");
        b.act_add("u.r1", entry);
        b.end_span();
        b.pool("mp", 2, 2, 0);
        b.build().unwrap()
    }

    fn unet_like() -> crate::graph::LayerGraph {
        let mut b = GraphBuilder::new("u", (1, 8, 8));
        b.conv("e1", 4, 3, 1, 1, true);
        b.act("a1");
        b.pool("p1", 2, 2, 0);
        b.conv("e2", 8, 3, 1, 1, true);
        b.act("a2");
        b.upsample("up", 2);
        b.concat("cat", 2);
        b.conv("d1", 4, 3, 1, 1, true);
        b.act("a3");
        b.build().unwrap()
    }

    fn param_get(model: &mut Model<f64>, id: ParamId, at: usize) -> f64 {
        let mut out = 0.0;
        model.visit_trainable(|i, w, _, _| {
            if i == id {
                out = w[at];
            }
        });
        out
    }

    fn param_set(model: &mut Model<f64>, id: ParamId, at: usize, v: f64) {
        model.visit_trainable(|i, w, _, _| {
            if i == id {
                w[at] = v;
            }
        });
    }

    fn loss_at(model: &mut Model<f64>, x: &Array4<f64>, labels: &[usize]) -> f64 {
        let (logits, _) = model.forward(x, true);
        softmax_cross_entropy(&logits, labels).0
    }

    /// Central-difference loss gradient for one parameter entry.
    fn numeric_grad(
        model: &mut Model<f64>,
        x: &Array4<f64>,
        labels: &[usize],
        id: ParamId,
        at: usize,
    ) -> f64 {
        let h = 1e-5;
        let orig = param_get(model, id, at);
        param_set(model, id, at, orig + h);
        let lp = loss_at(model, x, labels);
        param_set(model, id, at, orig - h);
        let lm = loss_at(model, x, labels);
        param_set(model, id, at, orig);
        (lp - lm) / (2.0 * h)
    }

    fn check_all_params(graph: crate::graph::LayerGraph, seed: u64) {
        let plan = build_ftl(&graph, HeadSpec { classes: 3, hidden: Some(5) }).unwrap();
        let mut model: Model<f64> = Model::from_plan(&plan, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        let (c, h, w) = graph.input;
        let x = Array4::from_shape_fn((4, c, h, w), |_| f64::standard_normal(&mut rng));
        let labels = vec![0usize, 2, 1, 0];

        model.zero_grads();
        let (logits, tape) = model.forward(&x, true);
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels);
        model.backward(&tape, &dlogits);

        // Collect analytic grads, then spot-check against finite differences.
        let mut analytic: Vec<(ParamId, usize, f64)> = Vec::new();
        model.visit_trainable(|id, w, g, _| {
            for probe in [0, w.len() / 2, w.len() - 1] {
                analytic.push((id, probe, g[probe]));
            }
        });
        for (id, at, got) in analytic {
            let num = numeric_grad(&mut model, &x, &labels, id, at);
            assert_abs_diff_eq!(got, num, epsilon = 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences_residual() {
        check_all_params(tiny_resnet(), 7);
    }

    #[test]
    fn gradients_match_finite_differences_unet() {
        check_all_params(unet_like(), 11);
    }

    #[test]
    fn projection_units_run_and_train() {
        let g = zoo::micro((1, 16, 16), &[4, 6, 8, 10]).unwrap();
        let plan = build_ftl(&g, HeadSpec::linear(2)).unwrap();
        let mut model: Model<f32> = Model::from_plan(&plan, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((2, 1, 16, 16), |_| f32::standard_normal(&mut rng));
        let (logits, tape) = model.forward(&x, true);
        assert_eq!(logits.dim(), (2, 2));
        let (_, d) = softmax_cross_entropy(&logits, &[0, 1]);
        model.backward(&tape, &d);
        let mut opt = Adam::new(1e-3);
        opt.step(&mut model, 1.0);
    }

    #[test]
    fn frozen_layers_block_gradient_flow() {
        let g = zoo::micro((1, 16, 16), &[4, 6, 8, 10]).unwrap();
        let plan = build_lwft(&g, 2, HeadSpec::linear(2)).unwrap();
        let mut model: Model<f32> = Model::from_plan(&plan, 3).unwrap();
        let before = model.state_dict();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((4, 1, 16, 16), |_| f32::standard_normal(&mut rng));
        let mut opt = Adam::new(1e-2);
        for _ in 0..3 {
            model.zero_grads();
            let (logits, tape) = model.forward(&x, true);
            let (_, d) = softmax_cross_entropy(&logits, &[0, 1, 0, 1]);
            model.backward(&tape, &d);
            opt.step(&mut model, 1.0);
        }
        let after = model.state_dict();
        let frozen_prefix: Vec<&str> = g.layers[..g.len() - 8]
            .iter()
            .map(|n| n.name.as_str())
            .collect();
        for ((name, _, a), (_, _, b)) in before.iter().zip(&after) {
            let layer = name.rsplit_once('.').map(|(l, _)| l).unwrap_or(name);
            if frozen_prefix.contains(&layer) {
                assert_eq!(a, b, "{name} changed despite being frozen");
            }
        }
        // The head must have moved.
        let head_before = before.iter().find(|(n, _, _)| n == "head.fc2.w").unwrap();
        let head_after = after.iter().find(|(n, _, _)| n == "head.fc2.w").unwrap();
        assert_ne!(head_before.2, head_after.2);
    }

    #[test]
    fn state_dict_roundtrip_is_exact() {
        let g = tiny_resnet();
        let plan = build_ftl(&g, HeadSpec::linear(2)).unwrap();
        let model: Model<f32> = Model::from_plan(&plan, 1).unwrap();
        let mut other: Model<f32> = Model::from_plan(&plan, 2).unwrap();
        let dict = model.state_dict();
        other.load_state_dict(&dict).unwrap();
        assert_eq!(model.state_dict(), other.state_dict());
    }

    #[test]
    fn transfer_respects_fresh_above() {
        let g = zoo::micro((1, 16, 16), &[4, 6, 8, 10]).unwrap();
        let src_plan = build_ftl(&g, HeadSpec::linear(4)).unwrap();
        let src: Model<f32> = Model::from_plan(&src_plan, 101).unwrap();
        let plan = crate::surgery::build_tf(&g, 9, HeadSpec::linear(2)).unwrap();
        let mut dst: Model<f32> = Model::from_plan(&plan, 202).unwrap();
        dst.transfer_from(&src, plan.fresh_above);
        let src_dict: std::collections::HashMap<String, Vec<f32>> = src
            .state_dict()
            .into_iter()
            .map(|(n, _, d)| (n, d))
            .collect();
        for (name, _, data) in dst.state_dict() {
            let layer = name.rsplit_once('.').map(|(l, _)| l).unwrap_or(&name);
            let idx = g.layers.iter().position(|n| n.name == layer);
            if let Some(i) = idx {
                if i + 1 <= plan.fresh_above {
                    assert_eq!(data, src_dict[&name], "{name} should be copied");
                } else if let Some(sd) = src_dict.get(&name) {
                    if sd.len() == data.len() {
                        assert_ne!(&data, sd, "{name} should be fresh");
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_ce_matches_hand_value() {
        let logits = Array2::from_shape_vec((1, 2), vec![0.0f64, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]);
        assert_abs_diff_eq!(loss, (2.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(grad[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[(0, 1)], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn eval_forward_is_deterministic_and_stat_free() {
        let g = tiny_resnet();
        let plan = build_ftl(&g, HeadSpec::linear(2)).unwrap();
        let mut model: Model<f32> = Model::from_plan(&plan, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| f32::standard_normal(&mut rng));
        let before = model.state_dict();
        let y1 = model.infer(&x);
        let y2 = model.infer(&x);
        assert_eq!(y1, y2);
        assert_eq!(before, model.state_dict(), "inference must not touch state");
    }
}
