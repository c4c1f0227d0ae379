//! Differentiable operators.

use std::rc::Rc;

use super::conv::{self, ConvGeometry};
use super::tape::{OpKind, Var};
use super::{fmt_shape, Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

pub(crate) enum Op<S> {
    Leaf,
    Conv {
        x: Rc<Tensor<S>>,
        weight: Rc<Tensor<S>>,
        geom: ConvGeometry,
    },
    LayerNorm {
        xhat: Tensor<S>,
        rstd: Vec<S>,
        gamma: Rc<Tensor<S>>,
    },
    PixelShuffle {
        r: usize,
    },
    Add,
    Mul {
        x: Rc<Tensor<S>>,
        y: Rc<Tensor<S>>,
    },
    ChannelScale {
        x: Rc<Tensor<S>>,
        lambda: Rc<Tensor<S>>,
    },
    Gelu {
        x: Rc<Tensor<S>>,
    },
    L1 {
        pred: Rc<Tensor<S>>,
        target: Rc<Tensor<S>>,
    },
    Sum {
        shape: Shape,
    },
    Slice {
        start: usize,
        full: Shape,
    },
    Concat {
        channels: Vec<usize>,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::PixelShuffle { .. } => OpKind::PixelShuffle,
            Op::Add => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::L1 { .. } => OpKind::L1Loss,
            Op::Sum { .. } => OpKind::Sum,
            Op::Slice { .. } => OpKind::SliceChannels,
            Op::Concat { .. } => OpKind::ConcatChannels,
        })
    }

    /// Vector-Jacobian product for each input whose `needs` flag is set.
    pub(crate) fn backward(&self, g: &Tensor<S>, needs: &[bool]) -> Result<Vec<Option<Tensor<S>>>> {
        let need = |i: usize| needs.get(i).copied().unwrap_or(false);
        Ok(match self {
            Op::Leaf => Vec::new(),
            Op::Conv { x, weight, geom } => {
                let grads = conv::backward(x, weight, g, *geom, [need(0), need(1), need(2)])?;
                vec![grads.x, grads.weight, grads.bias]
            }
            Op::LayerNorm { xhat, rstd, gamma } => layer_norm_backward(g, xhat, rstd, gamma, needs),
            Op::PixelShuffle { r } => vec![Some(pixel_unshuffle_raw(g, *r))],
            Op::Add => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
            Op::Mul { x, y } => vec![
                if need(0) { Some(g.zip_map(y, |a, b| a * b)?) } else { None },
                if need(1) { Some(g.zip_map(x, |a, b| a * b)?) } else { None },
            ],
            Op::ChannelScale { x, lambda } => {
                let gx = need(0).then(|| scale_channels_raw(g, lambda.data()));
                let gl = need(1).then(|| {
                    let mut acc = vec![S::zero(); x.c()];
                    for n in 0..x.n() {
                        for (c, a) in acc.iter_mut().enumerate() {
                            let dot = g
                                .plane_slice(n, c)
                                .iter()
                                .zip(x.plane_slice(n, c))
                                .fold(S::zero(), |s, (&p, &q)| s + p * q);
                            *a = *a + dot;
                        }
                    }
                    Tensor::from_vec(lambda.shape(), acc).expect("lambda shape")
                });
                vec![gx, gl]
            }
            Op::Gelu { x } => vec![Some(g.zip_map(x, |gv, xv| gv * gelu_grad(xv))?)],
            Op::L1 { pred, target } => {
                let k = g.item()? / S::of(pred.len() as f64);
                let gp = pred.zip_map(target, |p, t| sign(p - t) * k)?;
                let gt = need(1).then(|| gp.map(|v| -v));
                vec![need(0).then_some(gp), gt]
            }
            Op::Sum { shape } => vec![Some(Tensor::full(*shape, g.item()?))],
            Op::Slice { start, full } => {
                let mut out = Tensor::zeros(*full);
                let len = g.c();
                let p = g.plane();
                for n in 0..full[0] {
                    let dst = (n * full[1] + start) * p;
                    let src = n * len * p;
                    out.data_mut()[dst..dst + len * p].copy_from_slice(&g.data()[src..src + len * p]);
                }
                vec![Some(out)]
            }
            Op::Concat { channels } => {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(channels.len());
                for (i, &c) in channels.iter().enumerate() {
                    grads.push(need(i).then(|| slice_channels_raw(g, offset, c)));
                    offset += c;
                }
                grads
            }
        })
    }
}

#[inline]
fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{} vs {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
        ));
    }
    Ok(())
}

fn per_channel(op: &'static str, v: &Tensor<impl Scalar>, c: usize) -> Result<()> {
    if v.shape() != [1, c, 1, 1] {
        return Err(Error::shape(
            op,
            format!("per-channel vector {} for {c} channels", fmt_shape(v.shape())),
        ));
    }
    Ok(())
}

/// Stride-1 "same" convolution with zero padding (cross-correlation).
pub fn conv2d<'t, S: Scalar>(
    x: &Var<'t, S>,
    weight: &Var<'t, S>,
    bias: Option<&Var<'t, S>>,
    geom: ConvGeometry,
) -> Result<Var<'t, S>> {
    let value = conv::forward(x.value(), weight.value(), bias.map(Var::value), geom)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    x.tape.record(OpKind::Conv2d, &inputs, value, || Op::Conv {
        x: x.rc(),
        weight: weight.rc(),
        geom,
    })
}

/// Normalizes each spatial position across channels, then applies the
/// per-channel affine `gamma`, `beta`.
pub fn layer_norm<'t, S: Scalar>(
    x: &Var<'t, S>,
    gamma: &Var<'t, S>,
    beta: &Var<'t, S>,
    eps: f64,
) -> Result<Var<'t, S>> {
    const OP: &str = "layer_norm";
    let [n, c, h, w] = x.shape();
    if c == 0 {
        return Err(Error::invalid(OP, "zero channels"));
    }
    per_channel(OP, gamma.value(), c)?;
    per_channel(OP, beta.value(), c)?;
    let p = h * w;
    let xs = x.value().data();
    let inv_c = S::of(1.0 / c as f64);
    let eps = S::of(eps);
    let mut xhat = Tensor::zeros(x.shape());
    let mut rstd = vec![S::zero(); n * p];
    let mut mean = vec![S::zero(); p];
    let mut var = vec![S::zero(); p];
    for b in 0..n {
        let base = b * c * p;
        mean.fill(S::zero());
        var.fill(S::zero());
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xs[base + ch * p..base + (ch + 1) * p]) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_c);
        for ch in 0..c {
            let row = &xs[base + ch * p..base + (ch + 1) * p];
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        let r = &mut rstd[b * p..(b + 1) * p];
        for (ri, &s) in r.iter_mut().zip(&var) {
            *ri = S::one() / (s * inv_c + eps).sqrt();
        }
        let xh = xhat.data_mut();
        for ch in 0..c {
            let off = base + ch * p;
            for i in 0..p {
                xh[off + i] = (xs[off + i] - mean[i]) * r[i];
            }
        }
    }
    let gs = gamma.value().data();
    let bs = beta.value().data();
    let mut out = xhat.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / p) % c;
        *v = *v * gs[ch] + bs[ch];
    }
    x.tape
        .record(OpKind::LayerNorm, &[x, gamma, beta], out, || Op::LayerNorm {
            xhat,
            rstd,
            gamma: gamma.rc(),
        })
}

fn layer_norm_backward<S: Scalar>(
    g: &Tensor<S>,
    xhat: &Tensor<S>,
    rstd: &[S],
    gamma: &Tensor<S>,
    needs: &[bool],
) -> Vec<Option<Tensor<S>>> {
    let [n, c, h, w] = g.shape();
    let p = h * w;
    let gs = g.data();
    let xh = xhat.data();
    let gam = gamma.data();
    let inv_c = S::of(1.0 / c as f64);
    let gx = needs[0].then(|| {
        let mut out = Tensor::zeros(g.shape());
        let mut m1 = vec![S::zero(); p];
        let mut m2 = vec![S::zero(); p];
        for b in 0..n {
            let base = b * c * p;
            m1.fill(S::zero());
            m2.fill(S::zero());
            for ch in 0..c {
                let off = base + ch * p;
                for i in 0..p {
                    let d = gs[off + i] * gam[ch];
                    m1[i] = m1[i] + d;
                    m2[i] = m2[i] + d * xh[off + i];
                }
            }
            let r = &rstd[b * p..(b + 1) * p];
            let o = out.data_mut();
            for ch in 0..c {
                let off = base + ch * p;
                for i in 0..p {
                    let d = gs[off + i] * gam[ch];
                    o[off + i] = r[i] * (d - m1[i] * inv_c - xh[off + i] * m2[i] * inv_c);
                }
            }
        }
        out
    });
    let reduce = |f: &dyn Fn(usize) -> S| {
        let mut acc = vec![S::zero(); c];
        for b in 0..n {
            for (ch, a) in acc.iter_mut().enumerate() {
                let off = (b * c + ch) * p;
                *a = (off..off + p).fold(*a, |s, i| s + gs[i] * f(i));
            }
        }
        Tensor::from_vec([1, c, 1, 1], acc).expect("per-channel shape")
    };
    let gg = needs.get(1).copied().unwrap_or(false).then(|| reduce(&|i| xh[i]));
    let gb = needs.get(2).copied().unwrap_or(false).then(|| reduce(&|_| S::one()));
    vec![gx, gg, gb]
}

/// Sub-pixel rearrangement `(n, c*r*r, h, w) -> (n, c, h*r, w*r)`.
pub fn pixel_shuffle<'t, S: Scalar>(x: &Var<'t, S>, r: usize) -> Result<Var<'t, S>> {
    let [n, c, h, w] = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("{c} channels not divisible by {r}^2"),
        ));
    }
    let out_c = c / (r * r);
    let src = x.value();
    let mut out = Tensor::zeros([n, out_c, h * r, w * r]);
    let ow = w * r;
    let od = out.data_mut();
    let mut k = 0;
    for b in 0..n {
        for oc in 0..out_c {
            for oy in 0..h * r {
                for ox in 0..ow {
                    let ic = oc * r * r + (oy % r) * r + ox % r;
                    od[k] = src.at(b, ic, oy / r, ox / r);
                    k += 1;
                }
            }
        }
    }
    x.tape
        .record(OpKind::PixelShuffle, &[x], out, || Op::PixelShuffle { r })
}

fn pixel_unshuffle_raw<S: Scalar>(g: &Tensor<S>, r: usize) -> Tensor<S> {
    let [n, c, h, w] = g.shape();
    let (ih, iw) = (h / r, w / r);
    Tensor::from_fn([n, c * r * r, ih, iw], |b, ic, y, x| {
        let oc = ic / (r * r);
        let rem = ic % (r * r);
        g.at(b, oc, y * r + rem / r, x * r + rem % r)
    })
}

pub fn add<'t, S: Scalar>(x: &Var<'t, S>, y: &Var<'t, S>) -> Result<Var<'t, S>> {
    same_shape("add", x.value(), y.value())?;
    let value = x.value().zip_map(y.value(), |a, b| a + b)?;
    x.tape.record(OpKind::Add, &[x, y], value, || Op::Add)
}

/// Elementwise product.
pub fn mul<'t, S: Scalar>(x: &Var<'t, S>, y: &Var<'t, S>) -> Result<Var<'t, S>> {
    same_shape("mul", x.value(), y.value())?;
    let value = x.value().zip_map(y.value(), |a, b| a * b)?;
    x.tape.record(OpKind::Mul, &[x, y], value, || Op::Mul {
        x: x.rc(),
        y: y.rc(),
    })
}

fn scale_channels_raw<S: Scalar>(x: &Tensor<S>, lambda: &[S]) -> Tensor<S> {
    let p = x.plane();
    let c = x.c();
    let mut out = x.clone();
    for (i, row) in out.data_mut().chunks_mut(p.max(1)).enumerate() {
        let l = lambda[i % c];
        row.iter_mut().for_each(|v| *v = *v * l);
    }
    out
}

/// Multiplies channel `i` by `lambda[i]`; `lambda` has shape `1 x c x 1 x 1`.
pub fn channel_scale<'t, S: Scalar>(x: &Var<'t, S>, lambda: &Var<'t, S>) -> Result<Var<'t, S>> {
    per_channel("channel_scale", lambda.value(), x.shape()[1])?;
    let value = scale_channels_raw(x.value(), lambda.value().data());
    x.tape
        .record(OpKind::ChannelScale, &[x, lambda], value, || Op::ChannelScale {
            x: x.rc(),
            lambda: lambda.rc(),
        })
}

#[inline]
fn gelu_value<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    half * x * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let cdf = S::of(0.5) * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * S::of(0.5)).exp() * S::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Gaussian error linear unit, exact erf form.
pub fn gelu<'t, S: Scalar>(x: &Var<'t, S>) -> Result<Var<'t, S>> {
    let value = x.value().map(gelu_value);
    x.tape
        .record(OpKind::Gelu, &[x], value, || Op::Gelu { x: x.rc() })
}

/// Mean absolute error over every element.
pub fn l1_loss<'t, S: Scalar>(pred: &Var<'t, S>, target: &Var<'t, S>) -> Result<Var<'t, S>> {
    same_shape("l1_loss", pred.value(), target.value())?;
    let n = pred.value().len();
    if n == 0 {
        return Err(Error::invalid("l1_loss", "empty tensors"));
    }
    let total = pred
        .value()
        .data()
        .iter()
        .zip(target.value().data())
        .fold(S::zero(), |s, (&p, &t)| s + (p - t).abs());
    let value = Tensor::scalar(total / S::of(n as f64));
    pred.tape
        .record(OpKind::L1Loss, &[pred, target], value, || Op::L1 {
            pred: pred.rc(),
            target: target.rc(),
        })
}

pub fn sum<'t, S: Scalar>(x: &Var<'t, S>) -> Result<Var<'t, S>> {
    let value = Tensor::scalar(x.value().sum());
    let shape = x.shape();
    x.tape.record(OpKind::Sum, &[x], value, || Op::Sum { shape })
}

fn slice_channels_raw<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let p = h * w;
    let mut data = Vec::with_capacity(n * len * p);
    for b in 0..n {
        let off = (b * c + start) * p;
        data.extend_from_slice(&x.data()[off..off + len * p]);
    }
    Tensor::from_vec([n, len, h, w], data).expect("slice shape")
}

/// Channels `start..start + len`.
pub fn slice_channels<'t, S: Scalar>(x: &Var<'t, S>, start: usize, len: usize) -> Result<Var<'t, S>> {
    let full = x.shape();
    if start + len > full[1] || len == 0 {
        return Err(Error::invalid(
            "slice_channels",
            format!("range {start}..{} of {} channels", start + len, full[1]),
        ));
    }
    let value = slice_channels_raw(x.value(), start, len);
    x.tape
        .record(OpKind::SliceChannels, &[x], value, || Op::Slice { start, full })
}

/// Concatenates along the channel axis in the given order.
pub fn concat_channels<'t, S: Scalar>(parts: &[&Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.shape();
    for v in parts {
        let s = v.shape();
        if s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "concat_channels",
                format!("{} vs {}", fmt_shape(s), fmt_shape(first.shape())),
            ));
        }
    }
    let channels: Vec<usize> = parts.iter().map(|v| v.shape()[1]).collect();
    let total: usize = channels.iter().sum();
    let p = h * w;
    let mut data = Vec::with_capacity(n * total * p);
    for b in 0..n {
        for (v, &c) in parts.iter().zip(&channels) {
            let off = b * c * p;
            data.extend_from_slice(&v.value().data()[off..off + c * p]);
        }
    }
    let value = Tensor::from_vec([n, total, h, w], data)?;
    first
        .tape
        .record(OpKind::ConcatChannels, parts, value, || Op::Concat { channels })
}
