use super::{BlockStyle, Ffn, ManConfig, Tail, CFF_DW_KERNEL, CFF_EXPANSION, MLP_EXPANSION};
use crate::Result;

/// Multiply-accumulate counts for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaddsReport {
    /// Conv weight multiply-accumulates, the headline figure.
    pub conv: u64,
    /// Bias additions.
    pub bias: u64,
    /// Elementwise operations (norm, activations, products, residual adds),
    /// one per output element.
    pub elementwise: u64,
    /// Spatial size at which the body runs.
    pub lr_pixels: u64,
}

impl MaddsReport {
    pub fn headline(&self) -> u64 {
        self.conv
    }
}

/// Per low-resolution pixel tallies; parameters are independent of size.
#[derive(Default)]
struct Tally {
    weights: u64,
    biases: u64,
    affine: u64,
    elementwise: u64,
}

impl Tally {
    fn conv(&mut self, c_out: usize, c_in_per_group: usize, k: usize) {
        self.weights += (c_out * c_in_per_group * k * k) as u64;
        self.biases += c_out as u64;
    }

    fn affine(&mut self, n: usize) {
        self.affine += n as u64;
    }

    fn elementwise(&mut self, channels: usize, ops: usize) {
        self.elementwise += (channels * ops) as u64;
    }
}

fn tally(config: &ManConfig) -> Result<Tally> {
    config.validate()?;
    let c = config.width;
    let groups = config.attention_groups();
    let n = groups.len();
    let cg = c / n;
    let g = u64::from(config.branch_gelu) as usize;
    let mut t = Tally::default();

    t.conv(c, 3, 3);
    for _ in 0..config.n_blocks {
        // Grouped large-kernel attention: gate ⊗ pw(dwd(dw x)) per group.
        for s in &groups {
            t.conv(cg, 1, s.a);
            t.conv(cg, 1, s.b);
            t.conv(cg, cg, 1);
            t.conv(cg, 1, s.gate_kernel());
        }
        t.elementwise(c, 1);
        match config.block_style {
            BlockStyle::Metaformer => {
                // norm, f1, f2, f3, λ1; ⊗ f2, scale, residual.
                t.affine(2 * c + c);
                for _ in 0..3 {
                    t.conv(c, c, 1);
                }
                t.elementwise(c, 1 + g + 3);
                t.affine(2 * c + c);
                t.elementwise(c, 3);
                match config.ffn {
                    Ffn::Gsau => {
                        t.conv(c, c, 1);
                        t.conv(c, c, 1);
                        t.conv(c, 1, config.gsau_dw_kernel);
                        t.conv(c, c, 1);
                        t.elementwise(c, g + 1);
                    }
                    Ffn::Mlp => {
                        t.conv(MLP_EXPANSION * c, c, 1);
                        t.conv(c, MLP_EXPANSION * c, 1);
                        t.elementwise(MLP_EXPANSION * c, 1);
                    }
                    Ffn::Sg => {
                        t.conv(MLP_EXPANSION * c, c, 1);
                        t.conv(c, MLP_EXPANSION * c / 2, 1);
                        t.elementwise(MLP_EXPANSION * c / 2, 1);
                    }
                    Ffn::Cff => {
                        t.conv(CFF_EXPANSION * c, c, 1);
                        t.conv(CFF_EXPANSION * c, 1, CFF_DW_KERNEL);
                        t.conv(c, CFF_EXPANSION * c, 1);
                        t.elementwise(CFF_EXPANSION * c, 1);
                    }
                }
            }
            BlockStyle::Rcan => {
                t.conv(c, cg, 3);
                t.conv(c, cg, 3);
                t.conv(c, c, 1);
                t.conv(c, c, 1);
                t.affine(c);
                t.elementwise(c, 1 + g + 3);
            }
        }
    }
    match config.tail {
        Tail::Lkat => {
            let s = config.tail_spec();
            t.conv(c, c, 1);
            t.conv(c, 1, s.a);
            t.conv(c, 1, s.b);
            t.conv(c, c, 1);
            t.conv(c, c, 1);
            t.elementwise(c, g + 1);
        }
        Tail::Conv3x3 => t.conv(c, c, 3),
    }
    t.elementwise(c, 1);
    t.conv(3 * config.scale * config.scale, c, 3);
    Ok(t)
}

/// Exact number of trainable scalars: conv weights and biases, norm affine
/// parameters and per-channel residual scales.
pub fn count_params(config: &ManConfig) -> Result<u64> {
    let t = tally(config)?;
    Ok(t.weights + t.biases + t.affine)
}

/// Multiply-accumulates for one forward pass producing an
/// `out_h × out_w` image. The body runs at `(out_h/s) × (out_w/s)`.
pub fn count_madds(config: &ManConfig, out_h: usize, out_w: usize) -> Result<MaddsReport> {
    let t = tally(config)?;
    let px = ((out_h / config.scale) * (out_w / config.scale)) as u64;
    Ok(MaddsReport {
        conv: t.weights * px,
        bias: t.biases * px,
        elementwise: t.elementwise * px,
        lr_pixels: px,
    })
}
