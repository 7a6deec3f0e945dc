//! Optimization: Frobenius loss, Adam, warmup plus half-cosine learning
//! rate, exponential moving average of the weights, validation-based model
//! selection and checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Molecule;
use crate::model::{Checkpoint, GraphBatch, Model, ParamSet, TrainingState};
use crate::rng::{epoch_rng, Stream};
use crate::tensor::{frob_norm, Mat3};

fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    5e-4
}
fn default_warmup() -> u64 {
    1000
}
fn default_ema() -> f64 {
    0.999
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled weight decay.
    #[serde(default)]
    pub weight_decay: f64,
    /// Rescale the gradient when its global norm exceeds this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Threads sharing the forward/backward work of one batch.
    #[serde(default = "default_one")]
    pub workers: usize,
    /// Write `last.ckpt` every this many epochs.
    #[serde(default = "default_one")]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            warmup_steps: default_warmup(),
            ema_decay: default_ema(),
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            grad_clip: None,
            workers: 1,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay must be in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.workers == 0 || self.checkpoint_every == 0 {
            return fail("epochs, batch_size, workers and checkpoint_every must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return fail("adam betas must be in [0, 1) and eps positive");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size) as u64
    }
}

/// Learning rate for the 1-based optimizer step `step`: linear warmup to
/// `base` at `step = warmup`, then a half cosine reaching zero at `total`.
pub fn learning_rate(base: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Frobenius norm of the residual.
pub fn loss(pred: &Mat3, target: &Mat3) -> f64 {
    frob_norm(&(pred - target))
}

/// Records `scale * sum_m |pred_m - target_m|_F` for `9M x 1` block columns.
pub fn batch_loss(tape: &mut Tape<f32>, pred: Var, targets: &[f64], scale: f64) -> Result<Var> {
    let t = Matrix::from_vec(targets.len(), 1, targets.iter().map(|&x| x as f32).collect())?;
    let t = tape.constant(t);
    let diff = tape.sub(pred, t)?;
    let norms = tape.block_norm(diff, 9)?;
    let total = tape.sum_all(norms);
    Ok(tape.scale(total, scale as f32))
}

/// Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One bias-corrected update with decoupled weight decay.
    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let tensors = params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads.values());
        for ((((_, p), (_, m)), (_, v)), g) in tensors {
            let slots = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((p, m), v), &g) in slots {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = (mn / c1) / ((vn / c2).sqrt() + cfg.eps) + cfg.weight_decay * *p as f64;
                *p = (*p as f64 - lr * update) as f32;
            }
        }
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut ParamSet<f32>, params: &ParamSet<f32>, decay: f64) {
    for ((_, s), p) in shadow.iter_mut().zip(params.values()) {
        for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
            *s = (decay * *s as f64 + (1.0 - decay) * p as f64) as f32;
        }
    }
}

/// Index of the smallest value; ties go to the earliest. `None` when empty
/// or when every value is NaN.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mean Frobenius norm of the residual over molecules with targets.
pub fn frob_mae(model: &Model<f32>, mols: &[Molecule], batch_size: usize) -> Result<f64> {
    if mols.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = model.predict_many(mols, batch_size)?;
    let mut total = 0.0;
    for (p, m) in preds.iter().zip(mols) {
        let t = m
            .target_alpha
            .ok_or_else(|| Error::InvalidConfig(format!("molecule {} has no target", m.mol_id)))?;
        total += loss(p, &t);
    }
    Ok(total / mols.len() as f64)
}

/// Loss and summed gradients of `scale * sum |pred - target|_F` over `mols`.
fn chunk_gradients(model: &Model<f32>, mols: &[&Molecule], scale: f64) -> Result<(f64, ParamSet<f32>)> {
    let batch = GraphBatch::new(mols, model.config.cutoff, model.config.num_rbf)?;
    let targets = batch
        .targets
        .clone()
        .ok_or_else(|| Error::InvalidConfig("training molecules need targets".into()))?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let pred = model.forward(&mut tape, &p, &batch, None)?;
    let l = batch_loss(&mut tape, pred, &targets, scale)?;
    let value = tape.value(l).get(0, 0) as f64;
    let mut grads = model.params.zeros_like();
    if value.is_finite() {
        let mut g = tape.backward(l)?;
        for ((_, slot), (_, var)) in grads.iter_mut().zip(p.vars()) {
            if let Some(m) = g.take(*var) {
                *slot = m;
            }
        }
    }
    Ok((value, grads))
}

/// Loss and gradient of the mean per-molecule loss over `mols`, with the
/// work split across `workers` threads and merged in a fixed order.
pub fn batch_gradients(model: &Model<f32>, mols: &[&Molecule], workers: usize) -> Result<(f64, ParamSet<f32>)> {
    let scale = 1.0 / mols.len() as f64;
    let workers = workers.clamp(1, mols.len());
    if workers == 1 {
        return chunk_gradients(model, mols, scale);
    }
    let size = mols.len().div_ceil(workers);
    let results: Vec<Result<(f64, ParamSet<f32>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = mols
            .chunks(size)
            .map(|chunk| s.spawn(move || chunk_gradients(model, chunk, scale)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    let mut total = 0.0;
    let mut merged: Option<ParamSet<f32>> = None;
    for r in results {
        let (l, g) = r?;
        total += l;
        match &mut merged {
            None => merged = Some(g),
            Some(acc) => {
                for ((_, a), b) in acc.iter_mut().zip(g.values()) {
                    a.add_assign(b);
                }
            }
        }
    }
    Ok((total, merged.expect("at least one chunk")))
}

fn clip(grads: &mut ParamSet<f32>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|m| m.data())
        .map(|&x| (x as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_frob_mae: f64,
    pub wall_seconds: f64,
}

/// Mutable training state: raw weights, moving average and optimizer.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub ema: ParamSet<f32>,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    train: TrainConfig,
    history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            ema: model.params.clone(),
            adam: Adam::new(&model.params),
            seed: config.seed,
            model,
            config,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint that carries training state; `config`
    /// replaces the stored training configuration.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = ckpt
            .training
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        let meta: Metadata = serde_json::from_value(state.metadata)?;
        Ok(Self {
            model: Model::new(ckpt.config, ckpt.params)?,
            ema: state.ema,
            adam: Adam {
                m: state.adam_m,
                v: state.adam_v,
                step: state.step,
            },
            seed: ckpt.seed,
            config,
            epoch: state.epoch,
            history: meta.history,
        })
    }

    pub fn ema_model(&self) -> Model<f32> {
        Model {
            config: self.model.config.clone(),
            params: self.ema.clone(),
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        let vals: Vec<f64> = self.history.iter().map(|h| h.val_frob_mae).collect();
        select_best(&vals).map(|i| self.history[i].epoch)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let best = self.best_epoch();
        let best_val = best.and_then(|e| self.history.iter().find(|h| h.epoch == e)).map(|h| h.val_frob_mae);
        let metadata = serde_json::to_value(Metadata {
            train: self.config.clone(),
            history: self.history.clone(),
        })
        .expect("plain data");
        Checkpoint {
            config: self.model.config.clone(),
            seed: self.seed,
            params: self.model.params.clone(),
            training: Some(TrainingState {
                epoch: self.epoch,
                step: self.adam.step,
                best_val,
                best_epoch: best,
                metadata,
                ema: self.ema.clone(),
                adam_m: self.adam.m.clone(),
                adam_v: self.adam.v.clone(),
            }),
        }
    }

    /// One pass over `train` in a seeded order. Returns the mean
    /// per-molecule loss and the last learning rate.
    pub fn train_epoch(&mut self, train: &[Molecule]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(self.seed, Stream::Shuffle, epoch));
        let total = self.config.steps_per_epoch(train.len()) * self.config.epochs as u64;
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(self.config.batch_size) {
            let mols: Vec<&Molecule> = idx.iter().map(|&i| &train[i]).collect();
            let (l, mut grads) = batch_gradients(&self.model, &mols, self.config.workers)?;
            if !l.is_finite() || !grads.is_finite() {
                return Err(Error::DivergenceDetected {
                    epoch,
                    step: self.adam.step as usize + 1,
                });
            }
            if let Some(c) = self.config.grad_clip {
                clip(&mut grads, c);
            }
            lr = learning_rate(self.config.lr, self.adam.step + 1, self.config.warmup_steps, total);
            self.adam.update(&mut self.model.params, &grads, lr, &self.config);
            ema_update(&mut self.ema, &self.model.params, self.config.ema_decay);
            loss_sum += l * mols.len() as f64;
        }
        self.epoch = epoch;
        Ok((loss_sum / train.len() as f64, lr))
    }

    /// Trains until `config.epochs` epochs are complete, validating the
    /// moving-average weights after each epoch. With `out_dir`, writes
    /// `best.ckpt` on every validation improvement and `last.ckpt` at the
    /// configured cadence; on divergence the files on disk are the last good
    /// state. Log lines are written as JSON to `log`.
    pub fn run(
        &mut self,
        train: &[Molecule],
        val: &[Molecule],
        out_dir: Option<&Path>,
        log: Option<&mut dyn Write>,
    ) -> Result<()> {
        self.run_until(self.config.epochs, train, val, out_dir, log)
    }

    /// Like [`Trainer::run`] but stops after epoch `stop` (the schedule still
    /// spans `config.epochs`).
    pub fn run_until(
        &mut self,
        stop: usize,
        train: &[Molecule],
        val: &[Molecule],
        out_dir: Option<&Path>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<()> {
        if val.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let start = Instant::now();
        let path = |name: &str| out_dir.map(|d| d.join(name));
        while self.epoch < stop.min(self.config.epochs) {
            let (train_loss, lr) = self.train_epoch(train)?;
            let val_mae = frob_mae(&self.ema_model(), val, self.config.batch_size)?;
            if !val_mae.is_finite() {
                return Err(Error::DivergenceDetected {
                    epoch: self.epoch,
                    step: self.adam.step as usize,
                });
            }
            let entry = EpochLog {
                epoch: self.epoch,
                step: self.adam.step,
                lr,
                train_loss,
                val_frob_mae: val_mae,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&entry)?)?;
                w.flush()?;
            }
            self.history.push(entry);
            let improved = self.best_epoch() == Some(self.epoch);
            if improved {
                if let Some(p) = path("best.ckpt") {
                    self.checkpoint().save(p)?;
                }
            }
            if self.epoch % self.config.checkpoint_every == 0 || self.epoch == stop.min(self.config.epochs) {
                if let Some(p) = path("last.ckpt") {
                    self.checkpoint().save(p)?;
                }
            }
        }
        Ok(())
    }
}

/// Paths of the files written by [`Trainer::run`].
pub fn checkpoint_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join("best.ckpt"), out_dir.join("last.ckpt"))
}
