use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Reads a PNG into a `1×3×H×W` tensor in `[0, 1]`. Grayscale images are
/// promoted to RGB and alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0))
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes the first item of a `N×3×H×W` tensor as an 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = img.shape();
    if c != 3 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            detail: format!("expected 3 channels, got {c}"),
        });
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|ch| to_u8(img.at(0, ch, y as usize, x as usize))))
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Rounds to the nearest 8-bit level, as saving and reloading a PNG does.
pub fn quantize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| to_u8(v) as f32 / 255.0)
}
