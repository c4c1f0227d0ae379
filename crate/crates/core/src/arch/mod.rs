//! The MAN architecture family: configuration, parameter inventory,
//! forward blocks and complexity counters.

mod check;
mod count;
mod forward;
mod state;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use check::{check_network, randomized_state, NetworkCheck};
pub use count::{count_madds, count_params, MaddsReport};
pub use forward::{
    ffn_forward, gsau_forward, lka_forward, lkat_forward, mab_forward, man_forward,
    mlka_forward, rcan_block_forward,
};
pub use state::{build_model, param_inventory, Bound, Init, ModelState, ParamSpec, Scope};

/// Expansion ratio of the MLP feed-forward variant.
pub const MLP_EXPANSION: usize = 2;
/// Expansion ratio of the convolutional feed-forward variant.
pub const CFF_EXPANSION: usize = 3;
/// Depthwise kernel inside the convolutional feed-forward variant.
pub const CFF_DW_KERNEL: usize = 5;
/// Initial value of every per-channel residual scale.
pub const LAMBDA_INIT: f64 = 1e-2;
/// Standard deviation of the truncated normal used for conv weights.
pub const INIT_STD: f64 = 0.02;

/// One large-kernel attention decomposition: an `a×a` depthwise conv, a
/// `b×b` depthwise conv with dilation `d`, then a pointwise conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LkaSpec {
    /// Nominal kernel size being approximated.
    pub k: usize,
    pub d: usize,
    pub a: usize,
    pub b: usize,
}

impl LkaSpec {
    /// The three scales used by every preset, as `(K, d, a, b)`.
    pub const PRESETS: [LkaSpec; 3] = [
        LkaSpec { k: 7, d: 2, a: 3, b: 5 },
        LkaSpec { k: 21, d: 3, a: 5, b: 7 },
        LkaSpec { k: 35, d: 4, a: 7, b: 9 },
    ];

    pub fn new(k: usize, d: usize, a: usize, b: usize) -> Result<Self> {
        let spec = LkaSpec { k, d, a, b };
        spec.validate()?;
        Ok(spec)
    }

    /// Preset with nominal kernel `k` (7, 21 or 35).
    pub fn preset(k: usize) -> Result<Self> {
        Self::PRESETS
            .iter()
            .copied()
            .find(|s| s.k == k)
            .ok_or_else(|| Error::Config(format!("no LKA preset for K={k}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.b == 0 || self.b % 2 == 0 {
            return Err(Error::Config(format!("invalid LKA spec {self}: need d ≥ 1 and odd b")));
        }
        if self.a != 2 * self.d - 1 {
            return Err(Error::Config(format!("invalid LKA spec {self}: a must equal 2d-1")));
        }
        Ok(())
    }

    pub fn gate_kernel(&self) -> usize {
        self.a
    }

    /// Side of the square support of the impulse response.
    pub fn receptive_field(&self) -> usize {
        self.a + self.d * (self.b - 1)
    }
}

impl fmt::Display for LkaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-1", self.a, self.b)
    }
}

impl FromStr for LkaSpec {
    type Err = Error;

    /// Parses the `a-b-1` notation. The dilation is `(a+1)/2`; the nominal
    /// kernel comes from the matching preset, or `d·b` otherwise.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid LKA spec `{s}`, expected a-b-1"));
        let parts: Vec<usize> = s
            .trim()
            .split('-')
            .map(|p| p.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [a, b, 1] = parts[..] else { return Err(bad()) };
        if a % 2 == 0 {
            return Err(bad());
        }
        let d = (a + 1) / 2;
        let k = Self::PRESETS
            .iter()
            .find(|p| p.a == a && p.b == b)
            .map_or(d * b, |p| p.k);
        LkaSpec::new(k, d, a, b)
    }
}

impl TryFrom<String> for LkaSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LkaSpec> for String {
    fn from(s: LkaSpec) -> String {
        s.to_string()
    }
}

impl Serialize for LkaSpec {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LkaSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tiny,
    Light,
    Classical,
    Custom,
}

impl Variant {
    /// `(n_blocks, width)` of the preset.
    pub fn dims(self) -> Option<(usize, usize)> {
        match self {
            Variant::Tiny => Some((5, 48)),
            Variant::Light => Some((24, 60)),
            Variant::Classical => Some((36, 180)),
            Variant::Custom => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    /// Pre-norm attention branch followed by a pre-norm feed-forward branch.
    Metaformer,
    /// conv → gelu → conv → multiplicative MLKA attention → residual.
    Rcan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ffn {
    Gsau,
    Mlp,
    Sg,
    Cff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    Lkat,
    Conv3x3,
}

/// Which LKA groups the attention branch uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Attention {
    /// Every entry of `ManConfig::groups`.
    MlkaAll,
    /// One ungrouped gated LKA over all channels.
    LkaSingle(LkaSpec),
    /// An explicit list of groups.
    MlkaSubset(Vec<LkaSpec>),
}

impl fmt::Display for Attention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Attention::MlkaAll => f.write_str("mlka_all"),
            Attention::LkaSingle(s) => write!(f, "lka_single:{s}"),
            Attention::MlkaSubset(v) => {
                f.write_str("mlka_subset:")?;
                for (i, s) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{s}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Attention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "mlka_all" {
            return Ok(Attention::MlkaAll);
        }
        if let Some(rest) = s.strip_prefix("lka_single:") {
            return Ok(Attention::LkaSingle(rest.parse()?));
        }
        if let Some(rest) = s.strip_prefix("mlka_subset:") {
            let specs = rest.split('+').map(str::parse).collect::<Result<Vec<LkaSpec>>>()?;
            return Ok(Attention::MlkaSubset(specs));
        }
        Err(Error::Config(format!(
            "unknown attention `{s}`, expected mlka_all, lka_single:a-b-1 or mlka_subset:a-b-1+..."
        )))
    }
}

impl Serialize for Attention {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Attention {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Complete architecture description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManConfig {
    pub variant: Variant,
    pub scale: usize,
    pub n_blocks: usize,
    pub width: usize,
    pub groups: Vec<LkaSpec>,
    pub attention: Attention,
    pub block_style: BlockStyle,
    pub ffn: Ffn,
    pub tail: Tail,
    pub gsau_dw_kernel: usize,
    /// Apply gelu after the branch-entry pointwise convs and inside LKAT.
    /// `false` is the strict form with gating as the only nonlinearity.
    pub branch_gelu: bool,
}

impl ManConfig {
    /// Preset for `variant` at `scale`. `Variant::Custom` starts from the
    /// tiny dimensions.
    pub fn preset(variant: Variant, scale: usize) -> Self {
        let (n_blocks, width) = variant.dims().unwrap_or((5, 48));
        ManConfig {
            variant,
            scale,
            n_blocks,
            width,
            groups: LkaSpec::PRESETS.to_vec(),
            attention: Attention::MlkaAll,
            block_style: BlockStyle::Metaformer,
            ffn: Ffn::Gsau,
            tail: Tail::Lkat,
            gsau_dw_kernel: 7,
            branch_gelu: true,
        }
    }

    pub fn tiny(scale: usize) -> Self {
        Self::preset(Variant::Tiny, scale)
    }

    pub fn light(scale: usize) -> Self {
        Self::preset(Variant::Light, scale)
    }

    pub fn classical(scale: usize) -> Self {
        Self::preset(Variant::Classical, scale)
    }

    /// Small custom configuration used by tests and smoke runs.
    pub fn custom(n_blocks: usize, width: usize, scale: usize) -> Self {
        ManConfig {
            n_blocks,
            width,
            ..Self::preset(Variant::Custom, scale)
        }
    }

    /// LKA groups the attention branch actually splits into.
    pub fn attention_groups(&self) -> Vec<LkaSpec> {
        match &self.attention {
            Attention::MlkaAll => self.groups.clone(),
            Attention::LkaSingle(s) => vec![*s],
            Attention::MlkaSubset(v) => v.clone(),
        }
    }

    /// Tail attention decomposition.
    pub fn tail_spec(&self) -> LkaSpec {
        LkaSpec::PRESETS[2]
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::Config(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        let groups = self.attention_groups();
        if groups.is_empty() {
            return Err(Error::Config("attention needs at least one LKA group".into()));
        }
        for g in self.groups.iter().chain(&groups) {
            g.validate()?;
        }
        if self.width % groups.len() != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} attention groups",
                self.width,
                groups.len()
            )));
        }
        if self.gsau_dw_kernel == 0 || self.gsau_dw_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "gsau_dw_kernel must be odd, got {}",
                self.gsau_dw_kernel
            )));
        }
        if let Some((n, w)) = self.variant.dims() {
            if (n, w) != (self.n_blocks, self.width) {
                return Err(Error::Config(format!(
                    "variant {:?} fixes n_blocks={n}, width={w}; use variant = \"custom\" to change them",
                    self.variant
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_notation_round_trips() {
        for p in LkaSpec::PRESETS {
            assert_eq!(p.to_string().parse::<LkaSpec>().unwrap(), p);
        }
        assert_eq!("3-5-1".parse::<LkaSpec>().unwrap(), LkaSpec::preset(7).unwrap());
        assert!("4-5-1".parse::<LkaSpec>().is_err());
        assert!("3-5-2".parse::<LkaSpec>().is_err());
        assert!("3-4-1".parse::<LkaSpec>().is_err());
        assert!(LkaSpec::new(7, 2, 5, 5).is_err());
    }

    #[test]
    fn attention_round_trips() {
        for s in ["mlka_all", "lka_single:5-7-1", "mlka_subset:3-5-1+7-9-1"] {
            assert_eq!(s.parse::<Attention>().unwrap().to_string(), s);
        }
        assert!("mlka".parse::<Attention>().is_err());
    }

    #[test]
    fn presets_validate() {
        for s in 2..=4 {
            for c in [ManConfig::tiny(s), ManConfig::light(s), ManConfig::classical(s)] {
                c.validate().unwrap();
            }
        }
        assert!(ManConfig::tiny(5).validate().is_err());
        assert!(ManConfig::custom(1, 16, 2).validate().is_err());
        let mut c = ManConfig::tiny(4);
        c.n_blocks = 3;
        assert!(c.validate().is_err());
    }
}
