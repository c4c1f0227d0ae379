//! TOML run configuration with `[model]`, `[train]`, `[data]` and `[eval]`
//! sections.
//!
//! Every key is optional. Omitted model and training keys fall back to the
//! chosen preset; unknown keys are rejected. [`RunConfig::resolved`] fills
//! in every default so the written document records the whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{Attention, BlockStyle, Ffn, LkaSpec, ManConfig, Tail, Variant};
use crate::data::{load_dataset, quantize, synth, DatasetIndex, DatasetMode};
use crate::metrics::Protocol;
use crate::optim::{Stage, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

/// Preset variant and scale plus per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub scale: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<LkaSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Attention>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_style: Option<BlockStyle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn: Option<Ffn>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail: Option<Tail>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gsau_dw_kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_gelu: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::Tiny,
            scale: 4,
            n_blocks: None,
            width: None,
            groups: None,
            attention: None,
            block_style: None,
            ffn: None,
            tail: None,
            gsau_dw_kernel: None,
            branch_gelu: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPreset {
    Scratch,
    Finetune,
    Ablation,
}

/// Training preset plus per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub preset: TrainPreset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_iters: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Low-resolution patch side.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    /// Global gradient-norm clip; `0` or absent disables clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            preset: TrainPreset::Scratch,
            lr0: None,
            lr_min: None,
            total_iters: None,
            batch: None,
            patch: None,
            seed: None,
            stage: None,
            eval_every: None,
            checkpoint_every: None,
            grad_clip: None,
            augment: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Scene,
    Smooth,
}

/// Procedurally generated high-resolution images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Synthetic {
    pub kind: SynthKind,
    pub count: usize,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Synthetic {
    /// Quantized images with ids `synth{i}`, built at `scale`.
    pub fn build(&self, scale: usize) -> Result<DatasetIndex> {
        if self.count == 0 {
            return Err(Error::Config("synthetic data needs count ≥ 1".into()));
        }
        let images = (0..self.count)
            .map(|i| {
                let seed = self.seed.wrapping_add(i as u64);
                let img = match self.kind {
                    SynthKind::Scene => synth::scene(self.size, self.size, seed),
                    SynthKind::Smooth => synth::smooth(self.size, self.size, seed),
                };
                (format!("synth{i}"), quantize(&img))
            })
            .collect();
        DatasetIndex::from_hr_images(images, scale)
    }
}

/// Dataset locations. A directory takes precedence over a synthetic spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dir: Option<PathBuf>,
    pub mode: DatasetMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_synthetic: Option<Synthetic>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_synthetic: Option<Synthetic>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_dir: None,
            eval_dir: None,
            mode: DatasetMode::HrOnly,
            train_synthetic: None,
            eval_synthetic: None,
        }
    }
}

impl DataSection {
    fn load(&self, dir: &Option<PathBuf>, synthetic: &Option<Synthetic>, scale: usize) -> Result<Option<DatasetIndex>> {
        match (dir, synthetic) {
            (Some(d), _) => load_dataset(d, scale, self.mode).map(Some),
            (None, Some(s)) => s.build(scale).map(Some),
            (None, None) => Ok(None),
        }
    }

    pub fn train_set(&self, scale: usize) -> Result<DatasetIndex> {
        self.load(&self.train_dir, &self.train_synthetic, scale)?
            .ok_or_else(|| Error::Config("[data] needs train_dir or train_synthetic".into()))
    }

    /// The evaluation set, if one is configured.
    pub fn eval_set(&self, scale: usize) -> Result<Option<DatasetIndex>> {
        self.load(&self.eval_dir, &self.eval_synthetic, scale)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub y_channel: bool,
    /// Border pixels removed before scoring; defaults to the scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shave: Option<usize>,
    pub self_ensemble: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            y_channel: true,
            shave: None,
            self_ensemble: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.man_config()?;
        self.train_config()?;
        Ok(())
    }

    pub fn man_config(&self) -> Result<ManConfig> {
        let m = &self.model;
        let base = ManConfig::preset(m.variant, m.scale);
        let cfg = ManConfig {
            n_blocks: m.n_blocks.unwrap_or(base.n_blocks),
            width: m.width.unwrap_or(base.width),
            groups: m.groups.clone().unwrap_or_else(|| base.groups.clone()),
            attention: m.attention.clone().unwrap_or_else(|| base.attention.clone()),
            block_style: m.block_style.unwrap_or(base.block_style),
            ffn: m.ffn.unwrap_or(base.ffn),
            tail: m.tail.unwrap_or(base.tail),
            gsau_dw_kernel: m.gsau_dw_kernel.unwrap_or(base.gsau_dw_kernel),
            branch_gelu: m.branch_gelu.unwrap_or(base.branch_gelu),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let base = match t.preset {
            TrainPreset::Scratch => TrainConfig::scratch(),
            TrainPreset::Finetune => TrainConfig::finetune(),
            TrainPreset::Ablation => TrainConfig::ablation(),
        };
        let cfg = TrainConfig {
            lr0: t.lr0.unwrap_or(base.lr0),
            lr_min: t.lr_min.unwrap_or(base.lr_min),
            total_iters: t.total_iters.unwrap_or(base.total_iters),
            batch: t.batch.unwrap_or(base.batch),
            patch: t.patch.unwrap_or(base.patch),
            seed: t.seed.unwrap_or(base.seed),
            stage: t.stage.unwrap_or(base.stage),
            eval_every: t.eval_every.unwrap_or(base.eval_every),
            checkpoint_every: t.checkpoint_every.unwrap_or(base.checkpoint_every),
            grad_clip: match t.grad_clip {
                Some(c) if c == 0.0 => None,
                Some(c) => Some(c),
                None => base.grad_clip,
            },
            augment: t.augment.unwrap_or(base.augment),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            y_channel: self.eval.y_channel,
            shave: self.eval.shave.unwrap_or(self.model.scale),
            scale: self.model.scale,
            self_ensemble: self.eval.self_ensemble,
        }
    }

    /// Copy with every model, training and evaluation default written out.
    pub fn resolved(&self) -> Result<RunConfig> {
        let m = self.man_config()?;
        let t = self.train_config()?;
        let p = self.protocol();
        Ok(RunConfig {
            model: ModelSection {
                variant: m.variant,
                scale: m.scale,
                n_blocks: Some(m.n_blocks),
                width: Some(m.width),
                groups: Some(m.groups),
                attention: Some(m.attention),
                block_style: Some(m.block_style),
                ffn: Some(m.ffn),
                tail: Some(m.tail),
                gsau_dw_kernel: Some(m.gsau_dw_kernel),
                branch_gelu: Some(m.branch_gelu),
            },
            train: TrainSection {
                preset: self.train.preset,
                lr0: Some(t.lr0),
                lr_min: Some(t.lr_min),
                total_iters: Some(t.total_iters),
                batch: Some(t.batch),
                patch: Some(t.patch),
                seed: Some(t.seed),
                stage: Some(t.stage),
                eval_every: Some(t.eval_every),
                checkpoint_every: Some(t.checkpoint_every),
                grad_clip: Some(t.grad_clip.unwrap_or(0.0)),
                augment: Some(t.augment),
            },
            data: self.data.clone(),
            eval: EvalSection {
                y_channel: p.y_channel,
                shave: Some(p.shave),
                self_ensemble: p.self_ensemble,
            },
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
