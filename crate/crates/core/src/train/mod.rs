//! Deep-supervision training: per-step loss, AdamW, cosine schedule, EMA,
//! evaluation and the epoch loop with early stopping.

mod ema;
mod loss;
mod optim;
mod schedule;
mod stop;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use ema::{ema_update, EmaState};
pub use loss::{argmax, total_loss, LossParts};
pub use optim::{adamw_step, AdamW, AdamWConfig, OptimizerState};
pub use schedule::{cosine_lr, warmup_steps};
pub use stop::{best_epoch, early_stop};

use crate::data::{eval_batches, AugmentConfig, ChannelStats, ImageRecord, LabeledBatch, TrainBatches};
use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig, RecurrentState};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(decay, (1+n)/(10+n))` over the first
    /// updates so short runs do not evaluate near-initial weights.
    pub ema_warmup: bool,
    /// Report validation accuracy from the EMA shadow rather than the raw weights.
    pub eval_ema: bool,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 3e-4,
            weight_decay: 0.05,
            warmup_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            ema_warmup: true,
            eval_ema: true,
            batch_size: 128,
            eval_batch_size: 256,
            max_epochs: 1000,
            patience: 10,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &'static str, reason: &str| Err(Error::config(field, reason));
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return cfg("lr_max", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return cfg("weight_decay", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return cfg("warmup_fraction", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return cfg("betas", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return cfg("adam_eps", "must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return cfg("ema_decay", "must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return cfg("batch_size", "must be >= 1");
        }
        if self.eval_batch_size == 0 {
            return cfg("eval_batch_size", "must be >= 1");
        }
        if self.max_epochs == 0 {
            return cfg("max_epochs", "must be >= 1");
        }
        if self.patience == 0 {
            return cfg("patience", "must be >= 1");
        }
        if self.augment.mix && !(self.augment.mixup_alpha > 0.0 && self.augment.cutmix_alpha > 0.0) {
            return cfg("mixup_alpha/cutmix_alpha", "must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Scalar summary of one supervision step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_halt: f64,
    pub q_mean: f64,
    /// Examples whose argmax equals the hard label.
    pub correct: usize,
    pub batch: usize,
}

/// One forward pass and backward pass. Parameter gradients are cleared
/// first, so afterwards they hold exactly this step's gradient. The
/// returned state is detached.
///
/// `state = None` starts from the learned initial states; the replicas are
/// on the tape so `y_init`/`z_init` receive gradient.
pub fn forward_backward<T: Scalar>(
    model: &Model<T>,
    batch: &LabeledBatch,
    state: Option<&RecurrentState<T>>,
) -> Result<(StepStats, RecurrentState<T>)> {
    let cfg = &model.config;
    let b = batch.len();
    model.params.zero_grad();
    let tape = Tape::new();
    let (heads, out) = model.forward(&tape, &batch.images, b, state, cfg.recursions, cfg.latent_steps)?;
    let target = Tensor::new(
        &[b, batch.classes],
        batch.soft_targets.iter().map(|&v| T::lit(v as f64)).collect(),
    )?;
    let parts = total_loss(&tape, &heads.logits, &target, &batch.hard_labels, &heads.halt_logit)?;
    tape.backward(&parts.total)?;
    let stats = StepStats {
        loss_total: parts.total.item()?.as_f64(),
        loss_cls: parts.cls.item()?.as_f64(),
        loss_halt: parts.halt.item()?.as_f64(),
        q_mean: heads.q.iter().map(|q| q.as_f64()).sum::<f64>() / b as f64,
        correct: parts.halt_targets.iter().filter(|&&t| t == T::one()).count(),
        batch: b,
    };
    Ok((stats, out.detach()))
}

fn grad_norm_report<T: Scalar>(model: &Model<T>) -> String {
    let mut total = 0.0;
    let mut lines = Vec::new();
    for (spec, t) in param_specs(&model.config).iter().zip(model.params.tensors()) {
        let sq: f64 = t.grad().map_or(0.0, |g| g.iter().map(|v| v.as_f64().powi(2)).sum());
        total += sq;
        lines.push(format!("{}={:.4e}", spec.name, sq.sqrt()));
    }
    format!("total={:.4e}; {}", total.sqrt(), lines.join(", "))
}

/// Optimizer, EMA shadow and counters that evolve with the weights.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub ema: EmaState<T>,
    pub config: TrainConfig,
    pub progress: Progress,
}

/// Where a run is, in units that survive a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    /// Batches consumed so far; the learning-rate schedule's clock.
    pub batch_step: u64,
    /// Validation accuracy per completed epoch.
    pub history: Vec<f64>,
    pub best_accuracy: Option<f64>,
    /// Zero-based index into `history`.
    pub best_epoch: Option<usize>,
}

/// Outcome of the supervision loop on one batch.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub steps: Vec<StepStats>,
    pub lr: f64,
}

impl BatchOutcome {
    pub fn steps_used(&self) -> usize {
        self.steps.len()
    }

    pub fn last(&self) -> &StepStats {
        self.steps.last().expect("at least one supervision step")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_halt: f64,
    pub accuracy: f64,
    pub mean_q: f64,
    pub lr: f64,
    pub supervision_steps_used: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    /// One-based.
    pub epoch: usize,
    pub train: EpochStats,
    pub val: EpochStats,
    pub improved: bool,
    pub stop: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(&model.config, &model.params, config.adamw());
        let ema = EmaState::new(&model.params.tensors());
        Ok(Trainer {
            model,
            opt,
            ema,
            config,
            progress: Progress::default(),
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn ema_decay(&self) -> f64 {
        let d = self.config.ema_decay;
        if self.config.ema_warmup {
            let n = self.opt.state.step as f64;
            d.min((1.0 + n) / (10.0 + n))
        } else {
            d
        }
    }

    /// Forward, backward, AdamW update and EMA update for one supervision
    /// step; returns the detached state for the next step.
    pub fn supervision_step(
        &mut self,
        batch: &LabeledBatch,
        state: Option<&RecurrentState<T>>,
        lr: f64,
    ) -> Result<(StepStats, RecurrentState<T>)> {
        let (stats, next) = forward_backward(&self.model, batch, state)?;
        if !stats.loss_total.is_finite() {
            return Err(Error::NonFinite {
                step: self.opt.state.step + 1,
                lr,
                grad_norms: grad_norm_report(&self.model),
            });
        }
        self.opt.step(&self.model.params, lr)?;
        let decay = self.ema_decay();
        self.ema.update(&self.model.params.tensors(), decay)?;
        Ok((stats, next))
    }

    /// Up to `N` supervision steps on one batch, stopping after the first
    /// step whose batch-mean `q` (from that step's forward pass) exceeds `τ`.
    pub fn deep_supervision(&mut self, batch: &LabeledBatch, lr: f64) -> Result<BatchOutcome> {
        let n = self.model.config.supervision_steps;
        let tau = self.model.config.halt_threshold;
        let mut steps = Vec::with_capacity(n);
        let mut state: Option<RecurrentState<T>> = None;
        for _ in 0..n {
            let (stats, next) = self.supervision_step(batch, state.as_ref(), lr)?;
            steps.push(stats);
            state = Some(next);
            if stats.q_mean > tau {
                break;
            }
        }
        Ok(BatchOutcome { steps, lr })
    }

    fn schedule_total(&self, train_len: usize) -> u64 {
        (self.config.max_epochs * train_len.div_ceil(self.config.batch_size)) as u64
    }

    /// Learning rate for the next batch.
    pub fn current_lr(&self, train_len: usize) -> f64 {
        let total = self.schedule_total(train_len);
        let warm = warmup_steps(total, self.config.warmup_fraction);
        cosine_lr(self.progress.batch_step.min(total), total, warm, self.config.lr_max)
    }

    /// One pass over `train`; the schedule advances once per batch.
    pub fn train_epoch(&mut self, train: &[ImageRecord], stats: ChannelStats) -> Result<EpochStats> {
        let start = Instant::now();
        let classes = self.model.config.num_classes;
        let epoch = self.progress.epochs_done as u64;
        let batches = TrainBatches::new(
            train,
            classes,
            stats,
            self.config.batch_size,
            self.config.augment,
            self.config.seed,
            epoch,
        )?;
        let mut acc = Accum::default();
        let mut lr = 0.0;
        for batch in batches {
            lr = self.current_lr(train.len());
            let out = self.deep_supervision(&batch, lr)?;
            acc.add(out.last(), out.steps_used());
            self.progress.batch_step += 1;
        }
        Ok(acc.finish(lr, start.elapsed().as_secs_f64()))
    }

    /// Model used for reporting: the EMA shadow by default.
    pub fn eval_model(&self) -> Result<Model<T>> {
        if self.config.eval_ema {
            self.model.with_weights(&self.ema.shadow)
        } else {
            self.model.with_weights(&self.model.params.snapshot())
        }
    }

    pub fn evaluate(&self, records: &[ImageRecord], stats: ChannelStats) -> Result<EpochStats> {
        let m = self.eval_model()?;
        let c = &m.config;
        evaluate(
            &m,
            eval_batches(records, c.num_classes, stats, self.config.eval_batch_size),
            c.recursions,
            c.latent_steps,
        )
    }

    /// Epoch loop with early stopping. `hook` sees every epoch report
    /// after the progress counters have been updated, so it may checkpoint.
    pub fn fit(
        &mut self,
        train: &[ImageRecord],
        val: &[ImageRecord],
        stats: ChannelStats,
        mut hook: impl FnMut(&Trainer<T>, &EpochReport) -> Result<()>,
    ) -> Result<()> {
        while self.progress.epochs_done < self.config.max_epochs {
            if early_stop(&self.progress.history, self.config.patience) {
                break;
            }
            let train_stats = self.train_epoch(train, stats)?;
            let val_stats = self.evaluate(val, stats)?;
            let p = &mut self.progress;
            p.history.push(val_stats.accuracy);
            p.epochs_done += 1;
            let improved = p.best_accuracy.is_none_or(|b| val_stats.accuracy > b);
            if improved {
                p.best_accuracy = Some(val_stats.accuracy);
                p.best_epoch = Some(p.history.len() - 1);
            }
            let report = EpochReport {
                epoch: p.epochs_done,
                train: train_stats,
                val: val_stats,
                improved,
                stop: early_stop(&p.history, self.config.patience),
            };
            hook(self, &report)?;
            if report.stop {
                break;
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct Accum {
    total: f64,
    cls: f64,
    halt: f64,
    q: f64,
    correct: usize,
    seen: usize,
    steps: usize,
    batches: usize,
}

impl Accum {
    fn add(&mut self, s: &StepStats, steps_used: usize) {
        let w = s.batch as f64;
        self.total += s.loss_total * w;
        self.cls += s.loss_cls * w;
        self.halt += s.loss_halt * w;
        self.q += s.q_mean * w;
        self.correct += s.correct;
        self.seen += s.batch;
        self.steps += steps_used;
        self.batches += 1;
    }

    fn finish(self, lr: f64, wall_seconds: f64) -> EpochStats {
        let n = self.seen.max(1) as f64;
        EpochStats {
            loss_total: self.total / n,
            loss_cls: self.cls / n,
            loss_halt: self.halt / n,
            accuracy: self.correct as f64 / n,
            mean_q: self.q / n,
            lr,
            supervision_steps_used: self.steps as f64 / self.batches.max(1) as f64,
            wall_seconds,
        }
    }
}

/// Inference: learned initial state, exactly `recursions` steps, no halting,
/// argmax of the final logits. Losses are reported against the batch targets.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    batches: impl IntoIterator<Item = LabeledBatch>,
    recursions: usize,
    latent_steps: usize,
) -> Result<EpochStats> {
    let start = Instant::now();
    let mut acc = Accum::default();
    for batch in batches {
        let tape = Tape::no_grad();
        let b = batch.len();
        let (heads, _) = model.forward(&tape, &batch.images, b, None, recursions, latent_steps)?;
        let target = Tensor::new(
            &[b, batch.classes],
            batch.soft_targets.iter().map(|&v| T::lit(v as f64)).collect(),
        )?;
        let parts = total_loss(&tape, &heads.logits, &target, &batch.hard_labels, &heads.halt_logit)?;
        let stats = StepStats {
            loss_total: parts.total.item()?.as_f64(),
            loss_cls: parts.cls.item()?.as_f64(),
            loss_halt: parts.halt.item()?.as_f64(),
            q_mean: heads.q.iter().map(|q| q.as_f64()).sum::<f64>() / b as f64,
            correct: parts.halt_targets.iter().filter(|&&t| t == T::one()).count(),
            batch: b,
        };
        acc.add(&stats, 0);
    }
    let mut out = acc.finish(0.0, start.elapsed().as_secs_f64());
    out.supervision_steps_used = 0.0;
    Ok(out)
}
