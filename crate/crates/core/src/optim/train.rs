use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, cosine_lr, AdamState, Checkpoint, TrainConfig};
use crate::arch::{man_forward, ModelState};
use crate::data::{sample_batch, DatasetIndex};
use crate::tensor::{l1_loss, Tape};
use crate::{Error, Result};

/// Sampling key derived from a run seed.
pub fn rng_key(seed: u64) -> [u8; 32] {
    ChaCha8Rng::seed_from_u64(seed).get_seed()
}

/// Per-iteration loss and learning rate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub entries: Vec<StepInfo>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// One-based iteration number.
    pub iter: u64,
    pub loss: f32,
    pub lr: f64,
}

impl LossLog {
    pub fn losses(&self) -> Vec<f32> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn last(&self) -> Option<f32> {
        self.entries.last().map(|e| e.loss)
    }

    /// Means over consecutive non-overlapping windows.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.entries
            .chunks(window.max(1))
            .filter(|c| c.len() == window.max(1))
            .map(|c| c.iter().map(|e| e.loss as f64).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,lr\n");
        for e in &self.entries {
            writeln!(s, "{},{:e},{:e}", e.iter, e.loss, e.lr).expect("write to string");
        }
        s
    }

    /// Parses the output of [`LossLog::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize| Error::Data(format!("loss log line {line} is malformed"));
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, h)| h.trim()) != Some("iter,loss,lr") {
            return Err(bad(1));
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.split(',');
            let mut next = || f.next().ok_or_else(|| bad(i + 1));
            let iter = next()?.trim().parse().map_err(|_| bad(i + 1))?;
            let loss = next()?.trim().parse().map_err(|_| bad(i + 1))?;
            let lr = next()?.trim().parse().map_err(|_| bad(i + 1))?;
            entries.push(StepInfo { iter, loss, lr });
        }
        Ok(LossLog { entries })
    }
}

/// Training state: model, optimizer moments and the sampling key. Batch
/// `t` is drawn from a generator keyed by the run seed on stream `t`, so
/// any iteration can be reproduced without replaying earlier ones.
pub struct Trainer {
    pub state: ModelState,
    pub adam: AdamState,
    pub config: TrainConfig,
    rng_key: [u8; 32],
}

impl Trainer {
    pub fn new(state: ModelState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            state,
            adam: AdamState::new(),
            rng_key: rng_key(config.seed),
            config,
        })
    }

    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.step > config.total_iters {
            return Err(Error::Config(format!(
                "checkpoint is at iteration {} but the schedule has {}",
                ckpt.step, config.total_iters
            )));
        }
        Ok(Trainer {
            state: ckpt.state,
            adam: ckpt.adam,
            rng_key: ckpt.rng_key,
            config,
        })
    }

    /// Completed iterations.
    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.config.total_iters
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            adam: self.adam.clone(),
            step: self.step_count(),
            rng_key: self.rng_key,
        }
    }

    fn check_data(&self, data: &DatasetIndex) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if data.scale != self.state.config().scale {
            return Err(Error::Data(format!(
                "dataset scale {} does not match model scale {}",
                data.scale,
                self.state.config().scale
            )));
        }
        let p = self.config.patch;
        if let Some(small) = data.pairs.iter().find(|pair| pair.lr.h() < p || pair.lr.w() < p) {
            return Err(Error::Data(format!(
                "image `{}` ({}x{} at low resolution) cannot supply {p}x{p} patches",
                small.id,
                small.lr.h(),
                small.lr.w()
            )));
        }
        Ok(())
    }

    /// Runs one iteration: sample, forward, ℓ1, backward, Adam.
    pub fn step(&mut self, data: &DatasetIndex) -> Result<StepInfo> {
        let t = self.step_count();
        if t >= self.config.total_iters {
            return Err(Error::Config("schedule already complete".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(self.rng_key);
        rng.set_stream(t);
        let batch = sample_batch(data, self.config.batch, self.config.patch, self.config.augment, &mut rng)?;
        let lr = cosine_lr(t, self.config.total_iters, self.config.lr0, self.config.lr_min)?;

        let numeric = |e: Error| match e {
            Error::NonFinite { op } => Error::Numeric(format!("non-finite value in {op} at iteration {}", t + 1)),
            e => e,
        };
        let tape = Tape::new();
        let bound = self.state.bind(&tape, true);
        let x = tape.constant(batch.lr);
        let target = tape.constant(batch.hr);
        let out = man_forward(&x, self.state.config(), &bound).map_err(numeric)?;
        let loss = l1_loss(&out, &target).map_err(numeric)?;
        let loss_value = loss.value().item()?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {}", t + 1)));
        }
        tape.backward(&loss).map_err(numeric)?;
        let mut grads = IndexMap::with_capacity(self.state.params().len());
        for (name, var) in bound.iter() {
            let g = tape.grad(var).ok_or_else(|| Error::MissingGrad(name.clone()))?;
            grads.insert(name.clone(), g);
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let k = (clip / norm) as f32;
                grads.values_mut().for_each(|g| *g = g.scale(k));
            }
        }
        drop(bound);
        adam_step(
            self.state.iter_mut().map(|(k, v)| (k.as_str(), v)),
            &grads,
            &mut self.adam,
            lr,
        )?;
        Ok(StepInfo {
            iter: t + 1,
            loss: loss_value,
            lr,
        })
    }

    /// Runs until `end` iterations are complete (capped by the schedule),
    /// calling `hook` after every step.
    pub fn run_until<F>(&mut self, data: &DatasetIndex, end: u64, mut hook: F) -> Result<LossLog>
    where
        F: FnMut(&Trainer, &StepInfo) -> Result<()>,
    {
        self.check_data(data)?;
        let end = end.min(self.config.total_iters);
        let mut log = LossLog::default();
        while self.step_count() < end {
            let info = self.step(data)?;
            log.entries.push(info);
            hook(self, &info)?;
        }
        Ok(log)
    }
}

/// Trains `model` for the full schedule of `cfg`.
pub fn train(model: ModelState, data: &DatasetIndex, cfg: &TrainConfig) -> Result<(ModelState, LossLog)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    if cfg.total_iters == 0 {
        return Ok((trainer.state, LossLog::default()));
    }
    let log = trainer.run_until(data, cfg.total_iters, |_, _| Ok(()))?;
    Ok((trainer.state, log))
}
