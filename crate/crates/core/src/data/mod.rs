//! Image ingestion, bicubic degradation, aligned patch sampling and
//! dihedral augmentation.

mod dataset;
mod dihedral;
mod io;
mod resize;
pub mod synth;

use rand::Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub use dataset::{load_dataset, sample_batch, DatasetIndex, DatasetMode, PatchBatch};
pub use dihedral::{augment, Dihedral};
pub use io::{quantize, read_png, write_png};
pub use resize::{bicubic_resize, cubic};

/// Aligned high- and low-resolution versions of one image, each `1×3×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
    pub scale: usize,
    pub id: String,
}

/// Centre crop of `img` to the largest multiple of `scale` in each axis.
pub fn crop_to_multiple(img: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let [_, _, h, w] = img.shape();
    if scale == 0 || h < scale || w < scale {
        return Err(Error::invalid(
            "degrade",
            format!("image {h}x{w} is smaller than scale {scale}"),
        ));
    }
    let (ch, cw) = (h - h % scale, w - w % scale);
    Ok(crop(img, (h % scale) / 2, (w % scale) / 2, ch, cw))
}

/// Spatial crop of every plane.
pub fn crop(img: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Tensor<f32> {
    let [n, c, ih, iw] = img.shape();
    assert!(top + h <= ih && left + w <= iw, "crop out of bounds");
    let src = img.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for y in top..top + h {
            let row = (p * ih + y) * iw;
            out.extend_from_slice(&src[row + left..row + left + w]);
        }
    }
    Tensor::from_vec([n, c, h, w], out).expect("crop shape")
}

/// Builds the low-resolution counterpart of `hr`: centre crop to a multiple
/// of `scale`, then antialiased bicubic downscaling.
pub fn degrade(hr: &Tensor<f32>, scale: usize) -> Result<ImagePair> {
    let hr = crop_to_multiple(hr, scale)?;
    let lr = bicubic_resize(&hr, hr.h() / scale, hr.w() / scale, true)?;
    Ok(ImagePair {
        hr,
        lr,
        scale,
        id: String::new(),
    })
}

/// Uniformly random aligned crop: an `p×p` low-resolution patch and the
/// `p·s` square it covers in the high-resolution image.
pub fn sample_patch<R: Rng + ?Sized>(pair: &ImagePair, p: usize, rng: &mut R) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [_, _, h, w] = pair.lr.shape();
    if p == 0 || p > h || p > w {
        return Err(Error::Data(format!(
            "patch {p} does not fit low-resolution image `{}` of size {h}x{w}",
            pair.id
        )));
    }
    let top = rng.gen_range(0..=h - p);
    let left = rng.gen_range(0..=w - p);
    let s = pair.scale;
    Ok((
        crop(&pair.lr, top, left, p, p),
        crop(&pair.hr, top * s, left * s, p * s, p * s),
    ))
}
