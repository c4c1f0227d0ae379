use crate::tensor::Tensor;
use crate::{Error, Result};

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Sparse resampling matrix along one axis: `taps` input indices and
/// weights per output index.
struct Contributions {
    taps: usize,
    index: Vec<usize>,
    weight: Vec<f64>,
}

/// Mirrors an index into `0..len` with edge samples repeated.
fn reflect(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = i.rem_euclid(period) as usize;
    if m < len {
        m
    } else {
        period as usize - 1 - m
    }
}

fn contributions(in_len: usize, out_len: usize, antialias: bool) -> Contributions {
    let scale = out_len as f64 / in_len as f64;
    let stretch = antialias && scale < 1.0;
    let width = if stretch { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as usize + 2;
    let mut index = Vec::with_capacity(out_len * taps);
    let mut weight = Vec::with_capacity(out_len * taps);
    for u in 1..=out_len {
        // One-based source coordinate of the output sample centre.
        let x = u as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (x - width / 2.0).floor() as isize;
        let start = weight.len();
        for t in 0..taps as isize {
            let j = left + t;
            let d = x - j as f64;
            let w = if stretch { scale * cubic(scale * d) } else { cubic(d) };
            index.push(reflect(j - 1, in_len));
            weight.push(w);
        }
        let total: f64 = weight[start..].iter().sum();
        weight[start..].iter_mut().for_each(|w| *w /= total);
    }
    Contributions { taps, index, weight }
}

fn resize_width(data: &[f64], rows: usize, w: usize, out_w: usize, antialias: bool) -> Vec<f64> {
    let c = contributions(w, out_w, antialias);
    let mut out = vec![0.0; rows * out_w];
    for r in 0..rows {
        let src = &data[r * w..(r + 1) * w];
        for (x, o) in out[r * out_w..(r + 1) * out_w].iter_mut().enumerate() {
            let base = x * c.taps;
            *o = (0..c.taps).map(|t| c.weight[base + t] * src[c.index[base + t]]).sum();
        }
    }
    out
}

fn resize_height(data: &[f64], planes: usize, h: usize, w: usize, out_h: usize, antialias: bool) -> Vec<f64> {
    let c = contributions(h, out_h, antialias);
    let mut out = vec![0.0; planes * out_h * w];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * w..(p + 1) * out_h * w];
        for y in 0..out_h {
            let row = &mut dst[y * w..(y + 1) * w];
            for t in 0..c.taps {
                let k = y * c.taps + t;
                let wt = c.weight[k];
                let s = &src[c.index[k] * w..(c.index[k] + 1) * w];
                row.iter_mut().zip(s).for_each(|(o, &v)| *o += wt * v);
            }
        }
    }
    out
}

/// Bicubic resampling of every plane to `out_h × out_w` with the
/// `imresize` conventions: half-pixel centred sampling, mirrored borders,
/// normalized weights and, for `antialias` downscaling, a kernel stretched
/// by the scale factor. The axis with the smaller scale factor is resized
/// first. The result is clamped to `[0, 1]`.
pub fn bicubic_resize(img: &Tensor<f32>, out_h: usize, out_w: usize, antialias: bool) -> Result<Tensor<f32>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bicubic_resize", "target dimensions must be positive"));
    }
    let [n, c, h, w] = img.shape();
    if h == 0 || w == 0 {
        return Err(Error::invalid("bicubic_resize", "empty input image"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let planes = n * c;
    let mut data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let (mut ch, mut cw) = (h, w);
    let width_first = (out_w as f64 / w as f64) < (out_h as f64 / h as f64);
    for axis in if width_first { [1, 0] } else { [0, 1] } {
        if axis == 0 && ch != out_h {
            data = resize_height(&data, planes, ch, cw, out_h, antialias);
            ch = out_h;
        } else if axis == 1 && cw != out_w {
            data = resize_width(&data, planes * ch, cw, out_w, antialias);
            cw = out_w;
        }
    }
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec([n, c, out_h, out_w], data)
}
