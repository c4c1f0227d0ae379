//! Adam with cosine annealing, the training loop, and the weight and
//! checkpoint file formats.

mod format;
mod train;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub use format::{
    decode_weights, encode_weights, infer_config, load_checkpoint, load_weights, load_weights_for,
    save_checkpoint, save_weights, Checkpoint, WEIGHT_MAGIC, WEIGHT_VERSION,
};
pub use train::{rng_key, train, LossLog, StepInfo, Trainer};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter Adam moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    pub m: IndexMap<String, Tensor<S>>,
    pub v: IndexMap<String, Tensor<S>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        AdamState {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter. Moments are created
/// as zeros the first time a parameter is seen.
pub fn adam_step<'p, S: Scalar>(
    params: impl IntoIterator<Item = (&'p str, &'p mut Tensor<S>)>,
    grads: &IndexMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    let params: Vec<(&str, &mut Tensor<S>)> = params.into_iter().collect();
    for (name, p) in &params {
        let g = grads.get(*name).ok_or_else(|| Error::MissingGrad(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("gradient of `{name}` has the wrong shape")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (S::of(state.beta1), S::of(state.beta2));
    let c1 = S::of(1.0 - state.beta1.powi(t));
    let c2 = S::of(1.0 - state.beta2.powi(t));
    let (eps, lr) = (S::of(state.eps), S::of(lr));
    let one = S::one();
    for (name, p) in params {
        let g = &grads[name];
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((pi, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr_min + (lr0 - lr_min)·(1 + cos(πt/T))/2`.
pub fn cosine_lr(t: u64, total: u64, lr0: f64, lr_min: f64) -> Result<f64> {
    if t > total {
        return Err(Error::invalid("cosine_lr", format!("iteration {t} exceeds schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + (lr0 - lr_min) * (1.0 + phase.cos()) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Scratch,
    Finetune,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_iters: u64,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub stage: Stage,
    /// Iterations between evaluations; 0 disables them.
    pub eval_every: u64,
    /// Iterations between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Random dihedral transform per patch.
    pub augment: bool,
}

impl TrainConfig {
    /// From-scratch protocol: 160K iterations, batch 32 of 48×48 patches.
    pub fn scratch() -> Self {
        TrainConfig {
            lr0: 5e-4,
            lr_min: 1e-7,
            total_iters: 160_000,
            batch: 32,
            patch: 48,
            seed: 0,
            stage: Stage::Scratch,
            eval_every: 5_000,
            checkpoint_every: 5_000,
            grad_clip: None,
            augment: true,
        }
    }

    /// Fine-tuning protocol: 80K iterations at 1e-4, batch 16 of 64×64.
    pub fn finetune() -> Self {
        TrainConfig {
            lr0: 1e-4,
            total_iters: 80_000,
            batch: 16,
            patch: 64,
            stage: Stage::Finetune,
            ..Self::scratch()
        }
    }

    /// Ablation protocol: the scratch settings shortened to 20K iterations.
    pub fn ablation() -> Self {
        TrainConfig {
            total_iters: 20_000,
            ..Self::scratch()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0.is_finite() && self.lr0 >= 0.0 && self.lr_min.is_finite() && self.lr_min >= 0.0) {
            return bad("learning rates must be finite and non-negative");
        }
        if self.batch == 0 || self.patch == 0 {
            return bad("batch and patch must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}
