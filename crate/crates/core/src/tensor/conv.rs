//! Stride-1 "same" convolution kernels.
//!
//! Three fast paths cover every layer of the network: pointwise (GEMM),
//! depthwise (direct shifted-row accumulation) and general grouped
//! convolution (im2col + GEMM). [`conv2d_reference`] is the direct
//! definition the fast paths are tested against.

use super::{fmt_shape, gemm, MatMut, MatRef, Scalar, Shape, Tensor};
use crate::{parallel, Error, Result};

/// Dilation and channel grouping of a convolution. Stride is always 1 and
/// padding is always symmetric zero padding that preserves the spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn dense() -> Self {
        ConvGeometry {
            dilation: 1,
            groups: 1,
        }
    }

    pub const fn depthwise(channels: usize) -> Self {
        ConvGeometry {
            dilation: 1,
            groups: channels,
        }
    }

    pub const fn dilated_depthwise(channels: usize, dilation: usize) -> Self {
        ConvGeometry {
            dilation,
            groups: channels,
        }
    }

    pub const fn grouped(groups: usize) -> Self {
        ConvGeometry {
            dilation: 1,
            groups,
        }
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::dense()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    pad: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out
    }
}

pub(crate) fn conv_dims(
    x: Shape,
    weight: Shape,
    bias: Option<Shape>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    const OP: &str = "conv2d";
    let [n, c_in, h, w] = x;
    let [c_out, cin_g, kh, kw] = weight;
    if geom.dilation == 0 || geom.groups == 0 {
        return Err(Error::invalid(OP, "dilation and groups must be positive"));
    }
    if kh != kw || kh == 0 {
        return Err(Error::invalid(
            OP,
            format!("kernel must be square and non-empty, got {kh}x{kw}"),
        ));
    }
    if c_in % geom.groups != 0 || c_out % geom.groups != 0 {
        return Err(Error::invalid(
            OP,
            format!(
                "channels {c_in}->{c_out} not divisible by {} groups",
                geom.groups
            ),
        ));
    }
    if cin_g != c_in / geom.groups {
        return Err(Error::shape(
            OP,
            format!(
                "weight {} expects {} input channels per group, input {} has {}",
                fmt_shape(weight),
                cin_g,
                fmt_shape(x),
                c_in / geom.groups
            ),
        ));
    }
    let extent = (kh - 1) * geom.dilation + 1;
    if extent % 2 == 0 {
        return Err(Error::invalid(
            OP,
            format!("effective kernel extent {extent} is even; same padding would be asymmetric"),
        ));
    }
    if let Some(b) = bias {
        if b != [1, c_out, 1, 1] {
            return Err(Error::shape(
                OP,
                format!("bias {} for {c_out} output channels", fmt_shape(b)),
            ));
        }
    }
    Ok(ConvDims {
        n,
        c_in,
        c_out,
        h,
        w,
        k: kh,
        dilation: geom.dilation,
        pad: (extent - 1) / 2,
        groups: geom.groups,
        cin_g,
        cout_g: c_out / geom.groups,
    })
}

/// Output index range `[lo, hi)` whose source index `i + off` lies in `0..len`.
#[inline]
fn tap_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn offset(d: &ConvDims, tap: usize) -> isize {
    (tap * d.dilation) as isize - d.pad as isize
}

fn add_bias<S: Scalar>(out_n: &mut [S], bias: &[S], plane: usize) {
    for (row, &b) in out_n.chunks_mut(plane).zip(bias) {
        for v in row {
            *v = *v + b;
        }
    }
}

pub(crate) fn forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let d = conv_dims(x.shape(), weight.shape(), bias.map(Tensor::shape), geom)?;
    let mut out = Tensor::zeros([d.n, d.c_out, d.h, d.w]);
    let per_in = d.c_in * d.plane();
    let per_out = d.c_out * d.plane();
    let xs = x.data();
    let ws = weight.data();
    parallel::for_each_chunk(out.data_mut(), per_out, |n, out_n| {
        let x_n = &xs[n * per_in..(n + 1) * per_in];
        if d.is_pointwise() {
            gemm(
                MatRef::row_major(ws, d.c_out, d.c_in),
                MatRef::row_major(x_n, d.c_in, d.plane()),
                MatMut::row_major(out_n, d.c_out, d.plane()),
                S::zero(),
            );
        } else if d.is_depthwise() {
            let kk = d.k * d.k;
            for c in 0..d.c_in {
                let p = d.plane();
                depthwise_plane(
                    &d,
                    &x_n[c * p..(c + 1) * p],
                    &mut out_n[c * p..(c + 1) * p],
                    &ws[c * kk..(c + 1) * kk],
                );
            }
        } else {
            general_forward_item(&d, x_n, ws, out_n);
        }
        if let Some(b) = bias {
            add_bias(out_n, b.data(), d.plane());
        }
    });
    Ok(out)
}

fn depthwise_plane<S: Scalar>(d: &ConvDims, src: &[S], dst: &mut [S], taps: &[S]) {
    let (h, w) = (d.h, d.w);
    for ki in 0..d.k {
        let dy = offset(d, ki);
        let (y0, y1) = tap_range(h, dy);
        for kj in 0..d.k {
            let dx = offset(d, kj);
            let (x0, x1) = tap_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let t = taps[ki * d.k + kj];
            let sx0 = (x0 as isize + dx) as usize;
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let o = &mut dst[y * w + x0..y * w + x1];
                let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                for (a, &b) in o.iter_mut().zip(s) {
                    *a = *a + t * b;
                }
            }
        }
    }
}

/// Max im2col buffer size (elements) for banded forward passes.
const COL_BUDGET: usize = 1 << 22;

fn im2col<S: Scalar>(
    d: &ConvDims,
    x_n: &[S],
    c0: usize,
    rows: (usize, usize),
    col: &mut [S],
) {
    let (h, w) = (d.h, d.w);
    let p = d.plane();
    let bw = (rows.1 - rows.0) * w;
    for ci in 0..d.cin_g {
        let plane = &x_n[(c0 + ci) * p..(c0 + ci + 1) * p];
        for ki in 0..d.k {
            let dy = offset(d, ki);
            for kj in 0..d.k {
                let dx = offset(d, kj);
                let r = (ci * d.k + ki) * d.k + kj;
                let row = &mut col[r * bw..(r + 1) * bw];
                row.fill(S::zero());
                let (x0, x1) = tap_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                let sx0 = (x0 as isize + dx) as usize;
                for y in rows.0..rows.1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let base = (y - rows.0) * w;
                    row[base + x0..base + x1]
                        .copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(d: &ConvDims, col: &[S], c0: usize, gx_n: &mut [S]) {
    let (h, w) = (d.h, d.w);
    let p = d.plane();
    for ci in 0..d.cin_g {
        let plane = &mut gx_n[(c0 + ci) * p..(c0 + ci + 1) * p];
        for ki in 0..d.k {
            let dy = offset(d, ki);
            let (y0, y1) = tap_range(h, dy);
            for kj in 0..d.k {
                let dx = offset(d, kj);
                let (x0, x1) = tap_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                let sx0 = (x0 as isize + dx) as usize;
                let r = (ci * d.k + ki) * d.k + kj;
                let row = &col[r * p..(r + 1) * p];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (a, &b) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
}

fn general_forward_item<S: Scalar>(d: &ConvDims, x_n: &[S], ws: &[S], out_n: &mut [S]) {
    let p = d.plane();
    let ck = d.cin_g * d.k * d.k;
    let band = (COL_BUDGET / (ck * d.w).max(1)).clamp(1, d.h.max(1));
    let mut col = vec![S::zero(); ck * band * d.w];
    for g in 0..d.groups {
        let w_g = &ws[g * d.cout_g * ck..(g + 1) * d.cout_g * ck];
        let mut r0 = 0;
        while r0 < d.h {
            let r1 = (r0 + band).min(d.h);
            let bw = (r1 - r0) * d.w;
            let col = &mut col[..ck * bw];
            im2col(d, x_n, g * d.cin_g, (r0, r1), col);
            let start = g * d.cout_g * p + r0 * d.w;
            gemm(
                MatRef::row_major(w_g, d.cout_g, ck),
                MatRef::row_major(col, ck, bw),
                MatMut {
                    data: &mut out_n[start..],
                    rows: d.cout_g,
                    cols: bw,
                    row_stride: p,
                    col_stride: 1,
                },
                S::zero(),
            );
            r0 = r1;
        }
    }
}

pub(crate) struct ConvGrads<S> {
    pub x: Option<Tensor<S>>,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

pub(crate) fn backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    geom: ConvGeometry,
    need: [bool; 3],
) -> Result<ConvGrads<S>> {
    let d = conv_dims(x.shape(), weight.shape(), None, geom)?;
    if grad_out.shape() != [d.n, d.c_out, d.h, d.w] {
        return Err(Error::shape(
            "conv2d backward",
            format!("output gradient {}", fmt_shape(grad_out.shape())),
        ));
    }
    let [need_x, need_w, need_b] = need;
    let p = d.plane();
    let per_in = d.c_in * p;
    let per_out = d.c_out * p;
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();
    let wlen = weight.len();

    let items: Vec<(Vec<S>, Vec<S>)> = if need_x || need_w {
        parallel::map_indices(d.n, |n| {
            let x_n = &xs[n * per_in..(n + 1) * per_in];
            let g_n = &gs[n * per_out..(n + 1) * per_out];
            let mut gx = if need_x { vec![S::zero(); per_in] } else { Vec::new() };
            let mut gw = if need_w { vec![S::zero(); wlen] } else { Vec::new() };
            if d.is_pointwise() {
                if need_x {
                    gemm(
                        MatRef::row_major(ws, d.c_out, d.c_in).t(),
                        MatRef::row_major(g_n, d.c_out, p),
                        MatMut::row_major(&mut gx, d.c_in, p),
                        S::zero(),
                    );
                }
                if need_w {
                    gemm(
                        MatRef::row_major(g_n, d.c_out, p),
                        MatRef::row_major(x_n, d.c_in, p).t(),
                        MatMut::row_major(&mut gw, d.c_out, d.c_in),
                        S::zero(),
                    );
                }
            } else if d.is_depthwise() {
                depthwise_backward_item(&d, x_n, ws, g_n, need_x.then_some(&mut gx[..]), need_w.then_some(&mut gw[..]));
            } else {
                general_backward_item(&d, x_n, ws, g_n, need_x.then_some(&mut gx[..]), need_w.then_some(&mut gw[..]));
            }
            (gx, gw)
        })
    } else {
        Vec::new()
    };

    let mut grads = ConvGrads {
        x: None,
        weight: None,
        bias: None,
    };
    if need_x {
        let mut data = Vec::with_capacity(x.len());
        for (gx, _) in &items {
            data.extend_from_slice(gx);
        }
        grads.x = Some(Tensor::from_vec(x.shape(), data)?);
    }
    if need_w {
        let mut acc = vec![S::zero(); wlen];
        for (_, gw) in &items {
            for (a, &b) in acc.iter_mut().zip(gw) {
                *a = *a + b;
            }
        }
        grads.weight = Some(Tensor::from_vec(weight.shape(), acc)?);
    }
    if need_b {
        let mut acc = vec![S::zero(); d.c_out];
        for n in 0..d.n {
            for (co, a) in acc.iter_mut().enumerate() {
                let start = n * per_out + co * p;
                *a = *a + gs[start..start + p].iter().fold(S::zero(), |s, &v| s + v);
            }
        }
        grads.bias = Some(Tensor::from_vec([1, d.c_out, 1, 1], acc)?);
    }
    Ok(grads)
}

fn depthwise_backward_item<S: Scalar>(
    d: &ConvDims,
    x_n: &[S],
    ws: &[S],
    g_n: &[S],
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
) {
    let (h, w) = (d.h, d.w);
    let p = d.plane();
    let kk = d.k * d.k;
    for c in 0..d.c_in {
        let src = &x_n[c * p..(c + 1) * p];
        let go = &g_n[c * p..(c + 1) * p];
        for ki in 0..d.k {
            let dy = offset(d, ki);
            let (y0, y1) = tap_range(h, dy);
            for kj in 0..d.k {
                let dx = offset(d, kj);
                let (x0, x1) = tap_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                let sx0 = (x0 as isize + dx) as usize;
                let tap = ki * d.k + kj;
                let t = ws[c * kk + tap];
                let mut acc = S::zero();
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let g_row = &go[y * w + x0..y * w + x1];
                    if gw.is_some() {
                        let s_row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        acc = acc + g_row.iter().zip(s_row).fold(S::zero(), |s, (&a, &b)| s + a * b);
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let dst = &mut gx[c * p + sy * w + sx0..c * p + sy * w + sx0 + (x1 - x0)];
                        for (a, &b) in dst.iter_mut().zip(g_row) {
                            *a = *a + t * b;
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[c * kk + tap] = gw[c * kk + tap] + acc;
                }
            }
        }
    }
}

fn general_backward_item<S: Scalar>(
    d: &ConvDims,
    x_n: &[S],
    ws: &[S],
    g_n: &[S],
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
) {
    let p = d.plane();
    let ck = d.cin_g * d.k * d.k;
    let mut col = vec![S::zero(); ck * p];
    for g in 0..d.groups {
        let g_g = &g_n[g * d.cout_g * p..(g + 1) * d.cout_g * p];
        let w_range = g * d.cout_g * ck..(g + 1) * d.cout_g * ck;
        if let Some(gw) = gw.as_deref_mut() {
            im2col(d, x_n, g * d.cin_g, (0, d.h), &mut col);
            gemm(
                MatRef::row_major(g_g, d.cout_g, p),
                MatRef::row_major(&col, ck, p).t(),
                MatMut::row_major(&mut gw[w_range.clone()], d.cout_g, ck),
                S::one(),
            );
        }
        if let Some(gx) = gx.as_deref_mut() {
            gemm(
                MatRef::row_major(&ws[w_range], d.cout_g, ck).t(),
                MatRef::row_major(g_g, d.cout_g, p),
                MatMut::row_major(&mut col, ck, p),
                S::zero(),
            );
            col2im_add(d, &col, g * d.cin_g, gx);
        }
    }
}

/// Direct definition of the convolution: every output element is an explicit
/// sum over its receptive field. Slow; used as the correctness reference.
pub fn conv2d_reference<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let d = conv_dims(x.shape(), weight.shape(), bias.map(Tensor::shape), geom)?;
    let mut out = Tensor::zeros([d.n, d.c_out, d.h, d.w]);
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = co / d.cout_g;
            for y in 0..d.h {
                for xo in 0..d.w {
                    let mut acc = bias.map_or(S::zero(), |b| b.data()[co]);
                    for ci in 0..d.cin_g {
                        for ki in 0..d.k {
                            for kj in 0..d.k {
                                let sy = y as isize + offset(&d, ki);
                                let sx = xo as isize + offset(&d, kj);
                                if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                    continue;
                                }
                                acc = acc
                                    + weight.at(co, ci, ki, kj)
                                        * x.at(n, g * d.cin_g + ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(n, co, y, xo, acc);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_paths(x_shape: Shape, w_shape: Shape, geom: ConvGeometry) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::rand_uniform(x_shape, -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(w_shape, -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform([1, w_shape[0], 1, 1], -1.0, 1.0, &mut rng);
        let fast = forward(&x, &w, Some(&b), geom).unwrap();
        let slow = conv2d_reference(&x, &w, Some(&b), geom).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{geom:?}");
    }

    #[test]
    fn fast_paths_agree_with_reference() {
        check_paths([2, 5, 6, 7], [4, 5, 1, 1], ConvGeometry::dense());
        check_paths([2, 3, 6, 7], [3, 1, 5, 5], ConvGeometry::dilated_depthwise(3, 2));
        check_paths([1, 4, 9, 9], [4, 1, 9, 9], ConvGeometry::dilated_depthwise(4, 4));
        check_paths([2, 6, 5, 8], [6, 2, 3, 3], ConvGeometry::grouped(3));
        check_paths([1, 3, 7, 6], [5, 3, 3, 3], ConvGeometry::dense());
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros([1, 4, 5, 5]);
        let even = Tensor::<f32>::zeros([4, 1, 2, 2]);
        assert!(forward(&x, &even, None, ConvGeometry::depthwise(4)).is_err());
        let w = Tensor::<f32>::zeros([3, 4, 3, 3]);
        assert!(forward(&x, &w, None, ConvGeometry::grouped(3)).is_err());
        let mismatch = Tensor::<f32>::zeros([4, 2, 3, 3]);
        assert!(forward(&x, &mismatch, None, ConvGeometry::dense()).is_err());
        // Even kernel with even dilation: extent (2-1)*2+1 = 3 is odd and fine.
        assert!(forward(&x, &even, None, ConvGeometry::dilated_depthwise(4, 2)).is_ok());
    }

    #[test]
    fn tap_range_clips_to_image() {
        assert_eq!(tap_range(5, 0), (0, 5));
        assert_eq!(tap_range(5, 2), (0, 3));
        assert_eq!(tap_range(5, -2), (2, 5));
        assert_eq!(tap_range(5, 9), (0, 0));
        let (lo, hi) = tap_range(5, -9);
        assert!(lo >= hi);
    }
}
