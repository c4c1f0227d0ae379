//! Evaluation protocol: BT.601 luma, PSNR, SSIM, border shaving,
//! geometric self-ensemble and dataset reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::ModelState;
use crate::data::{bicubic_resize, quantize, DatasetIndex, Dihedral};
use crate::parallel;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Studio-swing luma `(16 + 65.481 R + 128.553 G + 24.966 B) / 255` of an
/// `N×3×H×W` image in `[0, 1]`.
pub fn rgb_to_y<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<f64>> {
    let [n, c, h, w] = img.shape();
    if c != 3 {
        return Err(Error::shape("rgb_to_y", format!("expected 3 channels, got {c}")));
    }
    Ok(Tensor::from_fn([n, 1, h, w], |b, _, y, x| {
        let v = |ch| img.at(b, ch, y, x).to_f64().unwrap_or(f64::NAN);
        (16.0 + 65.481 * v(0) + 128.553 * v(1) + 24.966 * v(2)) / 255.0
    }))
}

fn shaved_dims(op: &'static str, shape: [usize; 4], other: [usize; 4], shave: usize) -> Result<(usize, usize)> {
    if shape != other {
        return Err(Error::shape(op, "images differ in shape"));
    }
    let [_, _, h, w] = shape;
    if 2 * shave >= h || 2 * shave >= w {
        return Err(Error::invalid(op, format!("shave {shave} leaves nothing of a {h}x{w} image")));
    }
    Ok((h - 2 * shave, w - 2 * shave))
}

/// Values of plane `p` inside the shaved region, as `f64`.
fn region<S: Scalar>(t: &Tensor<S>, p: usize, shave: usize, rh: usize, rw: usize) -> Vec<f64> {
    let w = t.w();
    let plane = &t.data()[p * t.plane()..(p + 1) * t.plane()];
    let mut out = Vec::with_capacity(rh * rw);
    for y in shave..shave + rh {
        out.extend(plane[y * w + shave..y * w + shave + rw].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
    }
    out
}

/// `10·log10(1/MSE)` over the region left after removing `shave` pixels
/// from every border, capped at [`PSNR_CAP`].
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, shave: usize) -> Result<f64> {
    let (rh, rw) = shaved_dims("psnr", a.shape(), b.shape(), shave)?;
    let planes = a.n() * a.c();
    let mut se = 0.0;
    for p in 0..planes {
        let (ra, rb) = (region(a, p, shave, rh, rw), region(b, p, shave, rh, rw));
        se += ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    let mse = se / (planes * rh * rw) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|v| v / total).collect()
}

/// Separable "valid" Gaussian filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            rows[y * ow + xx] = (0..k).map(|j| g[j] * x[y * w + xx + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..k).map(|i| g[i] * rows[(y + i) * ow + xx]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu1 = filter_valid(a, h, w, &g);
    let mu2 = filter_valid(b, h, w, &g);
    let e11 = filter_valid(&prod(a, a), h, w, &g);
    let e22 = filter_valid(&prod(b, b), h, w, &g);
    let e12 = filter_valid(&prod(a, b), h, w, &g);
    let n = mu1.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (m1, m2) = (mu1[i], mu2[i]);
        let s11 = e11[i] - m1 * m1;
        let s22 = e22[i] - m2 * m2;
        let s12 = e12[i] - m1 * m2;
        let num = (2.0 * m1 * m2 + SSIM_C1) * (2.0 * s12 + SSIM_C2);
        let den = (m1 * m1 + m2 * m2 + SSIM_C1) * (s11 + s22 + SSIM_C2);
        acc += num / den;
    }
    acc / n as f64
}

/// Mean structural similarity over the shaved region with an 11×11
/// Gaussian window (σ = 1.5) and valid filtering. Multi-channel inputs are
/// averaged over channels.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, shave: usize) -> Result<f64> {
    let (rh, rw) = shaved_dims("ssim", a.shape(), b.shape(), shave)?;
    if rh < SSIM_WINDOW || rw < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{rh}x{rw} region is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let planes = a.n() * a.c();
    let total: f64 = (0..planes)
        .map(|p| ssim_plane(&region(a, p, shave, rh, rw), &region(b, p, shave, rh, rw), rh, rw))
        .sum();
    Ok(total / planes as f64)
}

/// Anything that maps a low-resolution image to a high-resolution one.
pub trait Upscaler: Sync {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Upscaler for ModelState {
    fn scale(&self) -> usize {
        self.config().scale
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.infer(lr)
    }
}

/// Plain bicubic interpolation, the reference baseline.
#[derive(Clone, Copy, Debug)]
pub struct Bicubic {
    pub scale: usize,
}

impl Upscaler for Bicubic {
    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        bicubic_resize(lr, lr.h() * self.scale, lr.w() * self.scale, true)
    }
}

/// Mean of the eight dihedral round trips `T⁻¹(model(T lr))`.
pub fn self_ensemble(model: &dyn Upscaler, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut acc: Option<Tensor<f32>> = None;
    for d in Dihedral::all() {
        let out = d.inverse().apply(&model.upscale(&d.apply(lr))?);
        match acc.as_mut() {
            None => acc = Some(out),
            Some(a) => a.add_assign(&out)?,
        }
    }
    Ok(acc.expect("eight transforms").scale(0.125))
}

/// Settings every reported number depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub y_channel: bool,
    pub shave: usize,
    pub scale: usize,
    pub self_ensemble: bool,
}

impl Protocol {
    /// Y channel, border shave equal to the scale, single pass.
    pub fn standard(scale: usize) -> Self {
        Protocol {
            y_channel: true,
            shave: scale,
            scale,
            self_ensemble: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub protocol: Protocol,
}

impl MetricReport {
    pub fn from_scores(per_image: Vec<ImageScore>, protocol: Protocol) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_psnr = per_image.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
        MetricReport {
            per_image,
            mean_psnr,
            mean_ssim,
            protocol,
        }
    }

    /// Protocol comment, `id,psnr,ssim` rows and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let p = &self.protocol;
        let mut s = format!(
            "# y_channel={},shave={},scale={},self_ensemble={}\nid,psnr,ssim\n",
            p.y_channel, p.shave, p.scale, p.self_ensemble
        );
        for r in &self.per_image {
            writeln!(s, "{},{:.6},{:.6}", r.id, r.psnr, r.ssim).expect("write to string");
        }
        writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr, self.mean_ssim).expect("write to string");
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.per_image.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let p = &self.protocol;
        let mut s = format!(
            "protocol: y_channel={} shave={} scale={} self_ensemble={}\n{:<width$}  {:>9}  {:>7}\n",
            p.y_channel, p.shave, p.scale, p.self_ensemble, "id", "PSNR(dB)", "SSIM"
        );
        for r in &self.per_image {
            writeln!(s, "{:<width$}  {:>9.4}  {:>7.5}", r.id, r.psnr, r.ssim).expect("write to string");
        }
        writeln!(s, "{:<width$}  {:>9.4}  {:>7.5}", "mean", self.mean_psnr, self.mean_ssim).expect("write to string");
        s
    }
}

/// Scores one super-resolved image against its ground truth. `sr` is
/// quantized to 8 bits first.
pub fn score(sr: &Tensor<f32>, hr: &Tensor<f32>, protocol: &Protocol) -> Result<(f64, f64)> {
    let sr = quantize(sr);
    if protocol.y_channel {
        let (a, b) = (rgb_to_y(&sr)?, rgb_to_y(hr)?);
        Ok((psnr(&a, &b, protocol.shave)?, ssim(&a, &b, protocol.shave)?))
    } else {
        Ok((psnr(&sr, hr, protocol.shave)?, ssim(&sr, hr, protocol.shave)?))
    }
}

/// Super-resolves every low-resolution image and scores it against its
/// high-resolution counterpart. Results keep dataset order.
pub fn evaluate(model: &dyn Upscaler, data: &DatasetIndex, protocol: &Protocol) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if model.scale() != data.scale || protocol.scale != data.scale {
        return Err(Error::Data(format!(
            "model scale {} and protocol scale {} must match dataset scale {}",
            model.scale(),
            protocol.scale,
            data.scale
        )));
    }
    let scores = parallel::map_indices(data.len(), |i| {
        let pair = &data.pairs[i];
        let sr = if protocol.self_ensemble {
            self_ensemble(model, &pair.lr)?
        } else {
            model.upscale(&pair.lr)?
        };
        let (p, s) = score(&sr, &pair.hr, protocol)?;
        Ok(ImageScore {
            id: pair.id.clone(),
            psnr: p,
            ssim: s,
        })
    });
    let per_image = scores.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_scores(per_image, *protocol))
}
