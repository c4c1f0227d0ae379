//! Procedural test images for runs without a real dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Ring { cx: f64, cy: f64, r: f64, t: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Ring { cx, cy, r, t } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                (d - r).abs() <= t
            }
            Shape::Rect { cx, cy, hw, hh, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos + dy * sin).abs() <= hw && (-dx * sin + dy * cos).abs() <= hh
            }
        }
    }
}

struct Fill {
    a: [f64; 3],
    b: [f64; 3],
    /// Grating wave vector; zero for a flat fill.
    k: (f64, f64),
    phase: f64,
}

impl Fill {
    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let t = 0.5 + 0.5 * (self.k.0 * x + self.k.1 * y + self.phase).sin();
        std::array::from_fn(|c| self.a[c] + (self.b[c] - self.a[c]) * t)
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(0.05..0.95))
}

/// An image of overlapping flat and striped shapes with anti-aliased edges
/// on a smooth background: sharp structure whose high frequencies bicubic
/// upscaling cannot recover.
pub fn scene(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = h.min(w) as f64;
    let bg = Fill {
        a: color(&mut rng),
        b: color(&mut rng),
        k: {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let f = rng.gen_range(0.5..2.0) * std::f64::consts::PI / size;
            (f * ang.cos(), f * ang.sin())
        },
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    let n_shapes = rng.gen_range(8..16);
    let mut layers = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let r = rng.gen_range(0.05..0.3) * size;
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Disk { cx, cy, r },
            1 => Shape::Ring {
                cx,
                cy,
                r,
                t: rng.gen_range(1.0..4.0),
            },
            _ => {
                let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                Shape::Rect {
                    cx,
                    cy,
                    hw: r,
                    hh: r * rng.gen_range(0.2..1.0),
                    cos: ang.cos(),
                    sin: ang.sin(),
                }
            }
        };
        let striped = rng.gen_bool(0.4);
        let fill = Fill {
            a: color(&mut rng),
            b: color(&mut rng),
            k: if striped {
                let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let period = rng.gen_range(5.0..16.0);
                let f = std::f64::consts::TAU / period;
                (f * ang.cos(), f * ang.sin())
            } else {
                (0.0, 0.0)
            },
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        layers.push((shape, fill));
    }
    const SS: usize = 3;
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let mut c = bg.at(px, py);
                    for (shape, fill) in &layers {
                        if shape.contains(px, py) {
                            c = fill.at(px, py);
                        }
                    }
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = (acc[ch] / (SS * SS) as f64) as f32;
            }
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("scene shape")
}

/// A band-limited image: a few low-frequency sinusoids per channel, values
/// in `[0.1, 0.9]`.
pub fn smooth(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[(f64, f64, f64); 3]> = (0..3)
        .map(|_| {
            std::array::from_fn(|_| {
                (
                    rng.gen_range(-3.0..3.0) / h as f64,
                    rng.gen_range(-3.0..3.0) / w as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
        })
        .collect();
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let v: f64 = waves[c]
            .iter()
            .map(|&(fy, fx, p)| (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + p).sin())
            .sum::<f64>()
            / 3.0;
        (0.5 + 0.4 * v) as f32
    })
}
