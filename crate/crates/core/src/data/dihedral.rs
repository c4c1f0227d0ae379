use rand::Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One of the eight symmetries of the square: `rot` quarter turns
/// counter-clockwise followed by an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral::from_index(i as u8))
    }

    pub fn from_index(i: u8) -> Dihedral {
        Dihedral {
            rot: i % 4,
            flip: i >= 4,
        }
    }

    pub fn index(self) -> u8 {
        self.rot + if self.flip { 4 } else { 0 }
    }

    /// Whether this element swaps height and width.
    pub fn transposes(self) -> bool {
        self.rot % 2 == 1
    }

    /// Maps output coordinates to source coordinates for an input of size
    /// `h × w`.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let ow = if self.transposes() { h } else { w };
        let x = if self.flip { ow - 1 - x } else { x };
        match self.rot {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        }
    }

    pub fn apply(self, t: &Tensor<f32>) -> Tensor<f32> {
        let [n, c, h, w] = t.shape();
        let (oh, ow) = if self.transposes() { (w, h) } else { (h, w) };
        let src = t.data();
        let mut out = Vec::with_capacity(t.len());
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = self.source(y, x, h, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        Tensor::from_vec([n, c, oh, ow], out).expect("dihedral shape")
    }

    /// `self` after `first`, using `R·F = F·R⁻¹`.
    pub fn compose(self, first: Dihedral) -> Dihedral {
        let r2 = if first.flip { (4 - self.rot) % 4 } else { self.rot };
        Dihedral {
            rot: (first.rot + r2) % 4,
            flip: self.flip ^ first.flip,
        }
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            self
        } else {
            Dihedral {
                rot: (4 - self.rot) % 4,
                flip: false,
            }
        }
    }
}

/// Applies one uniformly chosen dihedral transform to both square patches.
pub fn augment<R: Rng + ?Sized>(
    lr: &Tensor<f32>,
    hr: &Tensor<f32>,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>, Dihedral)> {
    let d = Dihedral::from_index(rng.gen_range(0..8));
    if d.transposes() && (lr.h() != lr.w() || hr.h() != hr.w()) {
        return Err(Error::invalid("augment", "quarter-turn rotations need square patches"));
    }
    Ok((d.apply(lr), d.apply(hr), d))
}
