use super::{Bound, BlockStyle, Ffn, LkaSpec, ManConfig, Scope, Tail};
use crate::tensor::{
    add, channel_scale, concat_channels, conv2d, gelu, layer_norm, mul, pixel_shuffle,
    slice_channels, ConvGeometry, Scalar, Var, LAYER_NORM_EPS,
};
use crate::{Error, Result};

fn conv<'t, S: Scalar>(x: &Var<'t, S>, p: &Scope<'_, 't, S>, geom: ConvGeometry) -> Result<Var<'t, S>> {
    conv2d(x, p.var("weight")?, Some(p.var("bias")?), geom)
}

fn norm<'t, S: Scalar>(x: &Var<'t, S>, p: &Scope<'_, 't, S>) -> Result<Var<'t, S>> {
    layer_norm(x, p.var("weight")?, p.var("bias")?, LAYER_NORM_EPS)
}

fn maybe_gelu<'t, S: Scalar>(x: Var<'t, S>, on: bool) -> Result<Var<'t, S>> {
    if on {
        gelu(&x)
    } else {
        Ok(x)
    }
}

fn check_width<S: Scalar>(op: &'static str, x: &Var<'_, S>, width: usize) -> Result<()> {
    if x.shape()[1] != width {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("input has {} channels, config width is {width}", x.shape()[1]),
        });
    }
    Ok(())
}

/// `pw(dwd(dw(x)))` with parameters `dw`, `dwd`, `pw` under `p`.
pub fn lka_forward<'t, S: Scalar>(x: &Var<'t, S>, spec: &LkaSpec, p: &Scope<'_, 't, S>) -> Result<Var<'t, S>> {
    let c = x.shape()[1];
    let dw = p.at("dw");
    let dwd = p.at("dwd");
    for (layer, k) in [(&dw, spec.a), (&dwd, spec.b)] {
        let ws = layer.var("weight")?.shape();
        if ws != [c, 1, k, k] {
            return Err(Error::invalid(
                "lka_forward",
                format!("{}.weight does not match spec {spec} on {c} channels", layer.prefix()),
            ));
        }
    }
    let y = conv(x, &dw, ConvGeometry::depthwise(c))?;
    let y = conv(&y, &dwd, ConvGeometry::dilated_depthwise(c, spec.d))?;
    conv(&y, &p.at("pw"), ConvGeometry::dense())
}

/// Splits channels evenly over `groups` and returns the concatenation of
/// `gate_j(x_j) ⊗ lka_j(x_j)`. Group `j` reads parameters under `groupj`.
pub fn mlka_forward<'t, S: Scalar>(x: &Var<'t, S>, groups: &[LkaSpec], p: &Scope<'_, 't, S>) -> Result<Var<'t, S>> {
    let c = x.shape()[1];
    if groups.is_empty() || c % groups.len() != 0 {
        return Err(Error::invalid(
            "mlka_forward",
            format!("{c} channels cannot be split into {} equal groups", groups.len()),
        ));
    }
    let cg = c / groups.len();
    let mut outs = Vec::with_capacity(groups.len());
    for (j, spec) in groups.iter().enumerate() {
        let gp = p.at(&format!("group{j}"));
        let xj = if groups.len() == 1 { x.clone() } else { slice_channels(x, j * cg, cg)? };
        let att = lka_forward(&xj, spec, &gp)?;
        let gate = conv(&xj, &gp.at("gate"), ConvGeometry::depthwise(cg))?;
        outs.push(mul(&gate, &att)?);
    }
    if outs.len() == 1 {
        return Ok(outs.pop().expect("one group"));
    }
    concat_channels(&outs.iter().collect::<Vec<_>>())
}

/// `dw(x) ⊗ y` with the depthwise conv under `p.dw`.
pub fn gsau_forward<'t, S: Scalar>(x: &Var<'t, S>, y: &Var<'t, S>, p: &Scope<'_, 't, S>) -> Result<Var<'t, S>> {
    if x.shape() != y.shape() {
        return Err(Error::shape("gsau_forward", "gate and value branches differ in shape"));
    }
    let g = conv(x, &p.at("dw"), ConvGeometry::depthwise(x.shape()[1]))?;
    mul(&g, y)
}

/// Feed-forward half of a block applied to the normalized input `n`,
/// before the residual scale.
pub fn ffn_forward<'t, S: Scalar>(n: &Var<'t, S>, config: &ManConfig, p: &Scope<'_, 't, S>) -> Result<Var<'t, S>> {
    let pw = ConvGeometry::dense();
    match config.ffn {
        Ffn::Gsau => {
            let x = maybe_gelu(conv(n, &p.at("f4"), pw)?, config.branch_gelu)?;
            let y = conv(n, &p.at("f5"), pw)?;
            conv(&gsau_forward(&x, &y, p)?, &p.at("f6"), pw)
        }
        Ffn::Mlp => {
            let h = gelu(&conv(n, &p.at("fc1"), pw)?)?;
            conv(&h, &p.at("fc2"), pw)
        }
        Ffn::Sg => {
            let h = conv(n, &p.at("fc1"), pw)?;
            let half = h.shape()[1] / 2;
            let g = mul(&slice_channels(&h, 0, half)?, &slice_channels(&h, half, half)?)?;
            conv(&g, &p.at("fc2"), pw)
        }
        Ffn::Cff => {
            let h = conv(n, &p.at("fc1"), pw)?;
            let h = conv(&h, &p.at("dw"), ConvGeometry::depthwise(h.shape()[1]))?;
            conv(&gelu(&h)?, &p.at("fc2"), pw)
        }
    }
}

/// Metaformer-style block with parameters under `p` (e.g. `blocks.0`):
/// `x + λ1·f3(MLKA(f1 N) ⊗ f2 N)` then `x + λ2·FFN(N)`.
pub fn mab_forward<'t, S: Scalar>(x: &Var<'t, S>, config: &ManConfig, p: &Scope<'_, 't, S>) -> Result<Var<'t, S>> {
    check_width("mab_forward", x, config.width)?;
    let pw = ConvGeometry::dense();
    let a = p.at("mlka");
    let n = norm(x, &a.at("norm"))?;
    let u = maybe_gelu(conv(&n, &a.at("f1"), pw)?, config.branch_gelu)?;
    let m = mlka_forward(&u, &config.attention_groups(), &a)?;
    let v = conv(&n, &a.at("f2"), pw)?;
    let y = conv(&mul(&m, &v)?, &a.at("f3"), pw)?;
    let x = add(x, &channel_scale(&y, a.var("scale")?)?)?;

    let f = p.at(if config.ffn == Ffn::Gsau { "gsau" } else { "ffn" });
    let n = norm(&x, &f.at("norm"))?;
    let y = ffn_forward(&n, config, &f)?;
    add(&x, &channel_scale(&y, f.var("scale")?)?)
}

/// Residual conv block: `y = conv1(gelu(conv0 x))`, then
/// `x + λ·f3(MLKA(f1 y) ⊗ y)`.
pub fn rcan_block_forward<'t, S: Scalar>(
    x: &Var<'t, S>,
    config: &ManConfig,
    p: &Scope<'_, 't, S>,
) -> Result<Var<'t, S>> {
    check_width("rcan_block_forward", x, config.width)?;
    let groups = config.attention_groups();
    let body = p.at("body");
    let g = ConvGeometry::grouped(groups.len());
    let y = conv(&gelu(&conv(x, &body.at("conv0"), g)?)?, &body.at("conv1"), g)?;
    let a = p.at("mlka");
    let pw = ConvGeometry::dense();
    let u = maybe_gelu(conv(&y, &a.at("f1"), pw)?, config.branch_gelu)?;
    let m = mlka_forward(&u, &groups, &a)?;
    let z = conv(&mul(&m, &y)?, &a.at("f3"), pw)?;
    add(x, &channel_scale(&z, a.var("scale")?)?)
}

/// Tail under `p` (`tail`): `conv1(y ⊗ LKA(y))` with `y = conv0(x)`, or a
/// single 3×3 conv when the config selects it.
pub fn lkat_forward<'t, S: Scalar>(x: &Var<'t, S>, config: &ManConfig, p: &Scope<'_, 't, S>) -> Result<Var<'t, S>> {
    check_width("lkat_forward", x, config.width)?;
    match config.tail {
        Tail::Conv3x3 => conv(x, &p.at("conv"), ConvGeometry::dense()),
        Tail::Lkat => {
            let pw = ConvGeometry::dense();
            let y = maybe_gelu(conv(x, &p.at("conv0"), pw)?, config.branch_gelu)?;
            let att = lka_forward(&y, &config.tail_spec(), &p.at("lka"))?;
            conv(&mul(&y, &att)?, &p.at("conv1"), pw)
        }
    }
}

/// Full network: `pixel_shuffle(recon(F_p + tail(blocks(F_p))))` with
/// `F_p = head(lr)`.
pub fn man_forward<'t, S: Scalar>(lr: &Var<'t, S>, config: &ManConfig, params: &Bound<'t, S>) -> Result<Var<'t, S>> {
    let [_, c, h, w] = lr.shape();
    if c != 3 {
        return Err(Error::shape("man_forward", format!("expected 3 input channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("man_forward", "empty spatial dimensions"));
    }
    let dense = ConvGeometry::dense();
    let fp = conv(lr, &params.scope("head"), dense)?;
    let mut f = fp.clone();
    for i in 0..config.n_blocks {
        let p = params.scope(format!("blocks.{i}"));
        f = match config.block_style {
            BlockStyle::Metaformer => mab_forward(&f, config, &p)?,
            BlockStyle::Rcan => rcan_block_forward(&f, config, &p)?,
        };
    }
    let fr = lkat_forward(&f, config, &params.scope("tail"))?;
    let out = conv(&add(&fp, &fr)?, &params.scope("recon"), dense)?;
    pixel_shuffle(&out, config.scale)
}
