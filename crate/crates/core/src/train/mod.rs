//! Optimizer, training loop and checkpoints.

pub mod adamw;
pub mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adamw::{adamw_step, clip_grad_norm, grad_norm, AdamState, AdamW};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::autodiff::Graph;
use crate::data::EncodedRecord;
use crate::error::{Error, Result};
use crate::heads::{head_nll, Target};
use crate::model::{lm_batch, record_batch, Batch, Model};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub opt: AdamW,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only at the end.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            opt: AdamW::default(),
            batch_size: 4,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters for continued LM training of a pretrained model.
    pub fn paper_lm() -> Self {
        TrainConfig {
            opt: AdamW {
                lr: 1e-5,
                ..AdamW::default()
            },
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.opt;
        let positive = [("train.lr", o.lr), ("train.eps", o.eps), ("train.beta1", o.betas.0), ("train.beta2", o.betas.1)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if o.betas.0 >= 1.0 || o.betas.1 >= 1.0 {
            return Err(Error::Config("train.beta1 and train.beta2 must be below 1".into()));
        }
        if o.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("train.weight_decay and train.clip_norm must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("train.batch_size and train.steps must be positive".into()));
        }
        if o.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "train.warmup_steps = {} exceeds train.steps = {}",
                o.warmup_steps, self.steps
            )));
        }
        Ok(())
    }
}

/// Training examples: BOS-prefixed token sequences for next-token training,
/// or synthetic records trained against their exact distributions.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainData {
    Lm(Vec<Vec<usize>>),
    Records(Vec<EncodedRecord>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Lm(s) => s.len(),
            TrainData::Records(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Batch, Vec<Target>)> {
        match self {
            TrainData::Lm(s) => lm_batch(&idx.iter().map(|&i| s[i].clone()).collect::<Vec<_>>()),
            TrainData::Records(r) => Ok(record_batch(&idx.iter().map(|&i| &r[i]).collect::<Vec<_>>())),
        }
    }
}

/// Example indices for `step`; a pure function of `(seed, step)` so resumed
/// runs draw the same batches.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    if batch_size >= n {
        return (0..n).collect();
    }
    let mut idx = index::sample(&mut rng, n, batch_size).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step={} loss={:.6} lr={:e}", self.step, self.loss, self.lr)
    }
}

pub struct Trainer<T: Real> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub state: AdamState<T>,
    pub cfg: TrainConfig,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model, store: ParamStore<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = AdamState::new(&store);
        Ok(Trainer { model, store, state, cfg })
    }

    /// Mean NLL of a batch under the current parameters, without gradients.
    pub fn eval_loss(&self, batch: &Batch, targets: &[Target]) -> Result<f64> {
        let mut g = Graph::inference();
        let out = self.model.forward(&mut g, &self.store, batch)?;
        let loss = head_nll(&mut g, out, targets)?;
        Ok(g.value(loss).data()[0].as_f64())
    }

    /// One optimizer step on an explicit batch. The returned loss is the
    /// pre-update value.
    pub fn step_on(&mut self, batch: &Batch, targets: &[Target]) -> Result<StepLog> {
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &self.store, batch)?;
        let loss_var = head_nll(&mut g, out, targets)?;
        let loss = g.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {}", self.state.step + 1)));
        }
        let mut grads = g.backward(loss_var)?.param_grads();
        drop(g);
        if self.cfg.clip_norm > 0.0 {
            if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::NonFiniteGrad(self.store.get(*id).name.clone()));
            }
            clip_grad_norm(&mut grads, self.cfg.clip_norm);
        }
        let lr = adamw_step(&mut self.store, &grads, &mut self.state, &self.cfg.opt)?;
        Ok(StepLog {
            step: self.state.step,
            loss,
            lr,
        })
    }

    /// One step on the batch scheduled for the next step number.
    pub fn step(&mut self, data: &TrainData) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::EmptyBatch("no training examples".into()));
        }
        let idx = batch_indices(self.cfg.seed, self.state.step + 1, data.len(), self.cfg.batch_size);
        let (batch, targets) = data.batch(&idx)?;
        self.step_on(&batch, &targets)
    }

    /// Trains until `cfg.steps`, writing one log line per step and
    /// checkpoints to `ckpt` on schedule and at the end.
    pub fn run(&mut self, data: &TrainData, log: &mut dyn Write, ckpt: Option<&Path>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.state.step < self.cfg.steps {
            let entry = match self.step(data) {
                Ok(e) => e,
                Err(e) => {
                    log.flush()?;
                    return Err(e);
                }
            };
            writeln!(log, "{entry}")?;
            logs.push(entry);
            let due = self.cfg.checkpoint_every > 0 && entry.step % self.cfg.checkpoint_every == 0;
            if let (Some(path), true) = (ckpt, due || entry.step == self.cfg.steps) {
                if let Err(e) = save_checkpoint(path, &self.store, &self.state) {
                    log.flush()?;
                    return Err(e);
                }
            }
        }
        log.flush()?;
        Ok(logs)
    }
}
