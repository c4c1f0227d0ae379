//! Browser bindings: LKA receptive-field maps, bicubic degradation with
//! PSNR/SSIM, and the parameter/multiply-add counter.

use man_core::arch::{count_madds, count_params, lka_forward, BlockStyle, Bound, Ffn, LkaSpec, ManConfig, Variant};
use man_core::data::{bicubic_resize, degrade, quantize};
use man_core::metrics::{score, Protocol};
use man_core::tensor::{Tape, Tensor};
use wasm_bindgen::prelude::*;

/// Normalized magnitude of the response of a single-channel LKA with
/// dilation `d`, dilated kernel `b` and unit weights to a centered impulse,
/// as a `size × size` row-major map.
pub fn impulse_map(d: usize, b: usize, size: usize) -> Result<Vec<f32>, String> {
    if d == 0 {
        return Err("dilation must be at least 1".into());
    }
    let a = 2 * d - 1;
    let spec = LkaSpec::new(receptive_field(d, b), d, a, b).map_err(|e| e.to_string())?;
    if size == 0 || size > 256 {
        return Err("size must be between 1 and 256".into());
    }
    let tape = Tape::<f32>::no_grad();
    let params = [
        ("lka.dw.weight", [1, 1, a, a], 1.0),
        ("lka.dw.bias", [1, 1, 1, 1], 0.0),
        ("lka.dwd.weight", [1, 1, b, b], 1.0),
        ("lka.dwd.bias", [1, 1, 1, 1], 0.0),
        ("lka.pw.weight", [1, 1, 1, 1], 1.0),
        ("lka.pw.bias", [1, 1, 1, 1], 0.0),
    ];
    let bound: Bound<'_, f32> = params
        .iter()
        .map(|(n, s, v)| (n.to_string(), tape.constant(Tensor::full(*s, *v))))
        .collect();
    let mut x = Tensor::<f32>::zeros([1, 1, size, size]);
    x.set(0, 0, size / 2, size / 2, 1.0);
    let y = lka_forward(&tape.constant(x), &spec, &bound.scope("lka")).map_err(|e| e.to_string())?;
    let y = y.into_tensor();
    let peak = y.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    Ok(y.data().iter().map(|v| if peak > 0.0 { v.abs() / peak } else { 0.0 }).collect())
}

/// Side of the square support of an LKA with dilation `d` and dilated
/// kernel `b`; the first depthwise kernel is `2d - 1`.
#[wasm_bindgen]
pub fn receptive_field(d: usize, b: usize) -> usize {
    (2 * d).saturating_sub(1) + d * b.saturating_sub(1)
}

#[wasm_bindgen]
pub fn lka_impulse(d: usize, b: usize, size: usize) -> Result<Vec<f32>, JsValue> {
    impulse_map(d, b, size).map_err(|e| JsValue::from_str(&e))
}

/// Low-resolution image, its bicubic upscale and the upscale's scores.
#[wasm_bindgen]
pub struct Degraded {
    lr: Vec<u8>,
    upscaled: Vec<u8>,
    lr_width: usize,
    lr_height: usize,
    width: usize,
    height: usize,
    psnr: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl Degraded {
    #[wasm_bindgen(getter)]
    pub fn lr(&self) -> Vec<u8> {
        self.lr.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn upscaled(&self) -> Vec<u8> {
        self.upscaled.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn lr_width(&self) -> usize {
        self.lr_width
    }
    #[wasm_bindgen(getter)]
    pub fn lr_height(&self) -> usize {
        self.lr_height
    }
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }
    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }
    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

fn from_rgba(rgba: &[u8], w: usize, h: usize) -> Result<Tensor<f32>, String> {
    if rgba.len() != w * h * 4 {
        return Err(format!("expected {} RGBA bytes, got {}", w * h * 4, rgba.len()));
    }
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| rgba[(y * w + x) * 4 + c] as f32 / 255.0))
}

fn to_rgba(t: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (t.h(), t.w());
    let mut out = vec![255u8; h * w * 4];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 4 + c] = (t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Bicubic degradation of an RGBA image followed by bicubic upscaling,
/// scored on the Y channel with the border shaved by `scale`.
pub fn degrade_image(rgba: &[u8], width: usize, height: usize, scale: usize) -> Result<Degraded, String> {
    if !(2..=4).contains(&scale) {
        return Err("scale must be 2, 3 or 4".into());
    }
    let img = from_rgba(rgba, width, height)?;
    let pair = degrade(&img, scale).map_err(|e| e.to_string())?;
    let lr = quantize(&pair.lr);
    let (h, w) = (pair.hr.h(), pair.hr.w());
    let up = bicubic_resize(&lr, h, w, true).map_err(|e| e.to_string())?;
    let (psnr, ssim) = score(&up, &pair.hr, &Protocol::standard(scale)).map_err(|e| e.to_string())?;
    Ok(Degraded {
        lr: to_rgba(&lr),
        upscaled: to_rgba(&up),
        lr_width: lr.w(),
        lr_height: lr.h(),
        width: w,
        height: h,
        psnr,
        ssim,
    })
}

#[wasm_bindgen]
pub fn degrade_rgba(rgba: &[u8], width: usize, height: usize, scale: usize) -> Result<Degraded, JsValue> {
    degrade_image(rgba, width, height, scale).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub struct Counts {
    pub params: f64,
    pub madds: f64,
}

/// Exact parameter count and multiply-adds at `out_w × out_h` output for a
/// preset variant with the chosen feed-forward and block style.
pub fn count_model(
    variant: &str,
    scale: usize,
    ffn: &str,
    block_style: &str,
    out_w: usize,
    out_h: usize,
) -> Result<Counts, String> {
    let variant = match variant {
        "tiny" => Variant::Tiny,
        "light" => Variant::Light,
        "classical" => Variant::Classical,
        _ => return Err(format!("unknown variant `{variant}`")),
    };
    let ffn = match ffn {
        "gsau" => Ffn::Gsau,
        "mlp" => Ffn::Mlp,
        "sg" => Ffn::Sg,
        "cff" => Ffn::Cff,
        _ => return Err(format!("unknown ffn `{ffn}`")),
    };
    let block_style = match block_style {
        "metaformer" => BlockStyle::Metaformer,
        "rcan" => BlockStyle::Rcan,
        _ => return Err(format!("unknown block style `{block_style}`")),
    };
    let cfg = ManConfig {
        ffn,
        block_style,
        ..ManConfig::preset(variant, scale)
    };
    let params = count_params(&cfg).map_err(|e| e.to_string())?;
    let madds = count_madds(&cfg, out_h, out_w).map_err(|e| e.to_string())?.headline();
    Ok(Counts {
        params: params as f64,
        madds: madds as f64,
    })
}

#[wasm_bindgen]
pub fn count(
    variant: &str,
    scale: usize,
    ffn: &str,
    block_style: &str,
    out_w: usize,
    out_h: usize,
) -> Result<Counts, JsValue> {
    count_model(variant, scale, ffn, block_style, out_w, out_h).map_err(|e| JsValue::from_str(&e))
}
