//! Training: Adam, global-norm clipping, a hold-then-plateau learning-rate
//! schedule, and the PIT SI-SDR loop over synthetic mixtures.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{split_validation, synth_dataset, Mixture};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{tape_pit_loss, SeparationResult};
use crate::model::MossFormer;
use crate::numerics::{gradient_check, GradCheckReport, NdArray, ParamStore, Scalar, Tape};

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count.
    pub t: u64,
    pub moments: BTreeMap<String, (NdArray<T>, NdArray<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    /// One update of every trainable parameter from its gradient slot.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (name, entry) in params.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let (m, v) = self.moments.entry(name.to_owned()).or_insert_with(|| {
                (
                    NdArray::zeros(entry.grad.shape()),
                    NdArray::zeros(entry.grad.shape()),
                )
            });
            let grad = entry.grad.data().to_vec();
            let value = entry.value_mut();
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm().to_f64_lossy();
    if norm > max_norm {
        params.scale_grads(T::of(max_norm / norm));
    }
    norm
}

/// Learning rate held for `hold_epochs`, then multiplied by `decay` each
/// time validation loss fails to improve for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub hold_epochs: usize,
    pub decay: f64,
    pub patience: usize,
    pub best: f64,
    pub stale_epochs: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            hold_epochs: cfg.hold_epochs,
            decay: cfg.lr_decay,
            patience: cfg.patience,
            best: f64::INFINITY,
            stale_epochs: 0,
        }
    }

    /// Records the validation loss of 1-based `epoch`; returns the rate for
    /// the next epoch.
    pub fn end_epoch(&mut self, epoch: usize, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        if epoch >= self.hold_epochs && self.stale_epochs >= self.patience.max(1) {
            self.lr *= self.decay;
            self.stale_epochs = 0;
        }
        self.lr
    }
}

/// One per-epoch log record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:e} train_loss={:.6} val_loss={:.6}",
            self.epoch, self.lr, self.train_loss, self.val_loss
        )
    }
}

pub struct TrainReport<T> {
    /// State at the epoch with the lowest validation loss.
    pub best: Checkpoint<T>,
    pub best_val_loss: f64,
    /// State after the final step.
    pub last: Checkpoint<T>,
    pub history: Vec<EpochLog>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

pub struct Trainer<T: Scalar> {
    pub model: MossFormer,
    pub cfg: TrainConfig,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub schedule: LrSchedule,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MossFormer::new(model_cfg)?;
        let params = model.init_params(cfg.seed)?;
        // Same seed as initialization, separate stream for dropout/shuffling.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: Adam::from_config(&cfg),
            schedule: LrSchedule::new(&cfg),
            rng,
            model,
            params,
            cfg,
            epoch: 0,
            step: 0,
        })
    }

    /// Resumes from a checkpoint. Optimizer and RNG state are restored when
    /// present.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ckpt.model.clone(), cfg)?;
        t.params = ckpt.params;
        if let Some(adam) = ckpt.adam {
            t.adam = adam;
        }
        if let Some(s) = ckpt.schedule {
            t.schedule = s;
        }
        if let Some(r) = ckpt.rng {
            t.rng = r.restore();
        }
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.cfg.clone(),
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            schedule: Some(self.schedule.clone()),
            rng: Some(RngState::capture(&self.rng)),
            epoch: self.epoch,
            step: self.step,
        }
    }

    fn param_norm_summary(&self) -> String {
        let mut norms: Vec<(f64, &str)> = self
            .params
            .iter()
            .map(|(n, e)| (e.value().sq_norm().to_f64_lossy().sqrt(), n))
            .collect();
        norms.sort_by(|a, b| b.0.total_cmp(&a.0));
        norms
            .iter()
            .take(5)
            .map(|(v, n)| format!("{n}={v:.4e}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Forward/backward over one batch, clip, and one Adam update. Returns
    /// the batch-mean loss.
    pub fn train_step(&mut self, batch: &[&Mixture<T>]) -> Result<f64> {
        self.params.zero_grads();
        let weight = T::of(1.0 / batch.len() as f64);
        let mut total = 0.0;
        for (b, m) in batch.iter().enumerate() {
            let mut tape = Tape::new();
            let mut g = Graph::train(&mut tape, &self.params, &mut self.rng);
            let sep = self.model.forward(&mut g, &m.mixture)?;
            let (loss, _) = tape_pit_loss(g.tape, &sep.estimates, &m.sources)?;
            let value = loss.value().data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {}, batch item {b}, step {}; largest parameter norms: {}",
                    self.epoch + 1,
                    self.step,
                    self.param_norm_summary()
                )));
            }
            let grads = tape.backward(&loss)?;
            self.params.accumulate(&tape, &grads, weight)?;
            total += value;
        }
        clip_grad_norm(&mut self.params, self.cfg.clip_norm);
        self.adam.step(&mut self.params, self.schedule.lr);
        self.step += 1;
        Ok(total / batch.len() as f64)
    }

    /// Mean eval-mode PIT loss.
    pub fn evaluate(&self, data: &[Mixture<T>]) -> Result<f64> {
        mean_loss(&self.model, &self.params, data)
    }

    fn steps_exhausted(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Runs epochs until `max_epochs` or `max_steps`. `val` may be empty, in
    /// which case the training loss drives the schedule and best checkpoint.
    pub fn fit(
        &mut self,
        train: &[Mixture<T>],
        val: &[Mixture<T>],
        mut log: impl FnMut(&EpochLog),
    ) -> Result<TrainReport<T>> {
        if train.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        let mut history = Vec::new();
        let mut step_losses = Vec::new();
        let mut best: Option<(f64, Checkpoint<T>)> = None;
        let mut order: Vec<usize> = (0..train.len()).collect();
        while self.epoch < self.cfg.max_epochs && !self.steps_exhausted() {
            order.shuffle(&mut self.rng);
            let lr = self.schedule.lr;
            let mut epoch_losses = Vec::new();
            for idx in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Mixture<T>> = idx.iter().map(|&i| &train[i]).collect();
                let loss = self.train_step(&batch)?;
                epoch_losses.push(loss);
                step_losses.push(loss);
                if self.steps_exhausted() {
                    break;
                }
            }
            self.epoch += 1;
            let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            let val_loss = if val.is_empty() {
                train_loss
            } else {
                self.evaluate(val)?
            };
            self.schedule.end_epoch(self.epoch, val_loss);
            let entry = EpochLog {
                epoch: self.epoch,
                lr,
                train_loss,
                val_loss,
            };
            log(&entry);
            history.push(entry);
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, self.checkpoint()));
            }
        }
        let last = self.checkpoint();
        let (best_val_loss, best) = best.unwrap_or_else(|| (f64::INFINITY, last.clone()));
        Ok(TrainReport {
            best,
            best_val_loss,
            last,
            history,
            step_losses,
        })
    }
}

/// Trains on `data` with its last eighth held out for validation.
pub fn train<T: Scalar>(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: &[Mixture<T>],
    log: impl FnMut(&EpochLog),
) -> Result<TrainReport<T>> {
    let (tr, val) = split_validation(data);
    Trainer::new(model_cfg, train_cfg)?.fit(tr, val, log)
}

pub fn mean_loss<T: Scalar>(
    model: &MossFormer,
    params: &ParamStore<T>,
    data: &[Mixture<T>],
) -> Result<f64> {
    let mut total = 0.0;
    for m in data {
        let mut tape = Tape::inference();
        let mut g = Graph::eval(&mut tape, params);
        let sep = model.forward(&mut g, &m.mixture)?;
        let (loss, _) = tape_pit_loss(g.tape, &sep.estimates, &m.sources)?;
        total += loss.value().data()[0].to_f64_lossy();
    }
    Ok(total / data.len() as f64)
}

/// Mean SI-SDRi (dB) of eval-mode separations under the best assignment.
pub fn mean_si_sdri<T: Scalar>(
    model: &MossFormer,
    params: &ParamStore<T>,
    data: &[Mixture<T>],
) -> Result<f64> {
    let mut total = 0.0;
    for m in data {
        let est = model.separate(params, &m.mixture)?;
        let res = SeparationResult::new(est, m.sources.clone(), m.mixture.clone())?;
        total += res.si_sdri()?.to_f64_lossy();
    }
    Ok(total / data.len() as f64)
}

/// Finite-difference check of the PIT loss gradient for every trainable
/// scalar of `cfg` on one synthetic mixture of `len` samples (double
/// precision, eval mode so dropout is off).
pub fn model_gradient_check(
    cfg: &ModelConfig,
    len: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let model = MossFormer::new(cfg.clone())?;
    let mut params = model.init_params::<f64>(seed)?;
    let data = synth_dataset::<f64>(seed, 1, cfg.speakers, len, cfg.sample_rate)?;
    let m = &data[0];
    gradient_check(&mut params, h, |tape, p| {
        let mut g = Graph::eval(tape, p);
        let sep = model.forward(&mut g, &m.mixture)?;
        Ok(tape_pit_loss(g.tape, &sep.estimates, &m.sources)?.0)
    })
}
