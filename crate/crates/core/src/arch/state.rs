use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BlockStyle, Ffn, ManConfig, Tail, CFF_DW_KERNEL, CFF_EXPANSION, INIT_STD, LAMBDA_INIT, MLP_EXPANSION};
use crate::tensor::{fmt_shape, Scalar, Shape, Tape, Tensor, Var};
use crate::{Error, Result};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal, std [`INIT_STD`], cut at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
    /// Constant [`LAMBDA_INIT`].
    Lambda,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

#[derive(Default)]
struct Inventory(Vec<ParamSpec>);

impl Inventory {
    fn push(&mut self, name: String, shape: Shape, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in_per_group: usize, k: usize) {
        self.push(format!("{name}.weight"), [c_out, c_in_per_group, k, k], Init::TruncNormal);
        self.push(format!("{name}.bias"), [1, c_out, 1, 1], Init::Zeros);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.weight"), [1, c, 1, 1], Init::Ones);
        self.push(format!("{name}.bias"), [1, c, 1, 1], Init::Zeros);
    }

    fn scale(&mut self, name: &str, c: usize) {
        self.push(name.to_string(), [1, c, 1, 1], Init::Lambda);
    }
}

/// Ordered list of every trainable tensor `config` defines.
pub fn param_inventory(config: &ManConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let c = config.width;
    let groups = config.attention_groups();
    let cg = c / groups.len();
    let mut inv = Inventory::default();
    inv.conv("head", c, 3, 3);
    for i in 0..config.n_blocks {
        let b = format!("blocks.{i}");
        let mlka = format!("{b}.mlka");
        match config.block_style {
            BlockStyle::Metaformer => {
                inv.norm(&format!("{mlka}.norm"), c);
                inv.conv(&format!("{mlka}.f1"), c, c, 1);
                inv.conv(&format!("{mlka}.f2"), c, c, 1);
            }
            BlockStyle::Rcan => {
                inv.conv(&format!("{b}.body.conv0"), c, cg, 3);
                inv.conv(&format!("{b}.body.conv1"), c, cg, 3);
                inv.conv(&format!("{mlka}.f1"), c, c, 1);
            }
        }
        for (j, g) in groups.iter().enumerate() {
            let p = format!("{mlka}.group{j}");
            inv.conv(&format!("{p}.dw"), cg, 1, g.a);
            inv.conv(&format!("{p}.dwd"), cg, 1, g.b);
            inv.conv(&format!("{p}.pw"), cg, cg, 1);
            inv.conv(&format!("{p}.gate"), cg, 1, g.gate_kernel());
        }
        inv.conv(&format!("{mlka}.f3"), c, c, 1);
        inv.scale(&format!("{mlka}.scale"), c);
        if config.block_style == BlockStyle::Metaformer {
            match config.ffn {
                Ffn::Gsau => {
                    let p = format!("{b}.gsau");
                    inv.norm(&format!("{p}.norm"), c);
                    inv.conv(&format!("{p}.f4"), c, c, 1);
                    inv.conv(&format!("{p}.f5"), c, c, 1);
                    inv.conv(&format!("{p}.dw"), c, 1, config.gsau_dw_kernel);
                    inv.conv(&format!("{p}.f6"), c, c, 1);
                    inv.scale(&format!("{p}.scale"), c);
                }
                ffn => {
                    let p = format!("{b}.ffn");
                    inv.norm(&format!("{p}.norm"), c);
                    let hidden = match ffn {
                        Ffn::Mlp | Ffn::Sg => MLP_EXPANSION * c,
                        _ => CFF_EXPANSION * c,
                    };
                    inv.conv(&format!("{p}.fc1"), hidden, c, 1);
                    if ffn == Ffn::Cff {
                        inv.conv(&format!("{p}.dw"), hidden, 1, CFF_DW_KERNEL);
                    }
                    let fc2_in = if ffn == Ffn::Sg { hidden / 2 } else { hidden };
                    inv.conv(&format!("{p}.fc2"), c, fc2_in, 1);
                    inv.scale(&format!("{p}.scale"), c);
                }
            }
        }
    }
    match config.tail {
        Tail::Lkat => {
            let t = config.tail_spec();
            inv.conv("tail.conv0", c, c, 1);
            inv.conv("tail.lka.dw", c, 1, t.a);
            inv.conv("tail.lka.dwd", c, 1, t.b);
            inv.conv("tail.lka.pw", c, c, 1);
            inv.conv("tail.conv1", c, c, 1);
        }
        Tail::Conv3x3 => inv.conv("tail.conv", c, c, 3),
    }
    inv.conv("recon", 3 * config.scale * config.scale, c, 3);
    Ok(inv.0)
}

/// Trained or freshly initialized parameters together with the config that
/// determines their names and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S: Scalar = f32> {
    config: ManConfig,
    params: IndexMap<String, Tensor<S>>,
}

/// Allocates and initializes every parameter of `config`. Deterministic for
/// a fixed `seed`.
pub fn build_model(config: &ManConfig, seed: u64) -> Result<ModelState> {
    let inventory = param_inventory(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::with_capacity(inventory.len());
    for spec in inventory {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(spec.shape),
            Init::Ones => Tensor::ones(spec.shape),
            Init::Lambda => Tensor::full(spec.shape, LAMBDA_INIT as f32),
            Init::TruncNormal => {
                let n = spec.shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break (z * INIT_STD) as f32;
                        }
                    })
                    .collect();
                Tensor::from_vec(spec.shape, data)?
            }
        };
        params.insert(spec.name, t);
    }
    Ok(ModelState {
        config: config.clone(),
        params,
    })
}

impl<S: Scalar> ModelState<S> {
    /// Assembles a state from named tensors, checking them against the
    /// inventory of `config`. Tensors are reordered into inventory order.
    pub fn from_parts(config: ManConfig, mut tensors: IndexMap<String, Tensor<S>>) -> Result<Self> {
        let inventory = param_inventory(&config)?;
        let mut params = IndexMap::with_capacity(inventory.len());
        for spec in &inventory {
            let t = tensors
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {}, config expects {}",
                    spec.name,
                    fmt_shape(t.shape()),
                    fmt_shape(spec.shape)
                )));
            }
            params.insert(spec.name.clone(), t);
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Format(format!("tensor `{name}` is not part of the config")));
        }
        Ok(ModelState { config, params })
    }

    pub fn config(&self) -> &ManConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<S>> {
        &self.params
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, requires_grad: bool) -> Bound<'t, S> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Inference without gradient recording.
    pub fn infer(&self, lr: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::no_grad();
        let bound = self.bind(&tape, false);
        let x = tape.constant(lr.clone());
        Ok(super::man_forward(&x, &self.config, &bound)?.into_tensor())
    }
}

/// Parameters registered on a tape.
pub struct Bound<'t, S: Scalar = f32> {
    vars: IndexMap<String, Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn get(&self, name: &str) -> Result<&Var<'t, S>> {
        self.vars.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, S>)> {
        self.vars.iter()
    }

    /// Parameters under `prefix`, e.g. `blocks.0.mlka`.
    pub fn scope(&self, prefix: impl Into<String>) -> Scope<'_, 't, S> {
        Scope {
            bound: self,
            prefix: prefix.into(),
        }
    }
}

/// A dotted-path view into [`Bound`] parameters.
#[derive(Clone)]
pub struct Scope<'a, 't, S: Scalar = f32> {
    bound: &'a Bound<'t, S>,
    prefix: String,
}

impl<'a, 't, S: Scalar> Scope<'a, 't, S> {
    pub fn at(&self, name: &str) -> Scope<'a, 't, S> {
        Scope {
            bound: self.bound,
            prefix: self.path(name),
        }
    }

    pub fn var(&self, name: &str) -> Result<&'a Var<'t, S>> {
        self.bound.get(&self.path(name))
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }
}

impl<'t, S: Scalar> FromIterator<(String, Var<'t, S>)> for Bound<'t, S> {
    fn from_iter<I: IntoIterator<Item = (String, Var<'t, S>)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}
