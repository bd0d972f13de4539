//! Python bindings: model configuration, forward passes, deep-supervision
//! training steps and checkpoints. Images cross the boundary as flat
//! `float32` sequences in `[B, C, H, W]` order, already normalized.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use vitrm::checkpoint::Checkpoint;
use vitrm::data::{AugmentConfig, LabeledBatch};
use vitrm::model::{count_params as count, Model, ModelConfig};
use vitrm::train::{cosine_lr as cosine, evaluate, EpochStats, StepStats, TrainConfig, Trainer};
use vitrm::{Error, Tape, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for vitrm::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Architecture and recursion settings. Every field is readable and
/// writable; the whole configuration is validated when a model is built.
#[pyclass(name = "ModelConfig", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    image_h: usize,
    image_w: usize,
    channels: usize,
    patch: usize,
    embed_dim: usize,
    latent_tokens: usize,
    heads: usize,
    ffn_hidden: usize,
    block_depth: usize,
    num_classes: usize,
    recursions: usize,
    latent_steps: usize,
    supervision_steps: usize,
    halt_threshold: f64,
    ln_eps: f64,
}

impl From<&ModelConfig> for PyModelConfig {
    fn from(c: &ModelConfig) -> Self {
        PyModelConfig {
            image_h: c.image_h,
            image_w: c.image_w,
            channels: c.channels,
            patch: c.patch,
            embed_dim: c.embed_dim,
            latent_tokens: c.latent_tokens,
            heads: c.heads,
            ffn_hidden: c.ffn_hidden,
            block_depth: c.block_depth,
            num_classes: c.num_classes,
            recursions: c.recursions,
            latent_steps: c.latent_steps,
            supervision_steps: c.supervision_steps,
            halt_threshold: c.halt_threshold,
            ln_eps: c.ln_eps,
        }
    }
}

impl PyModelConfig {
    fn core(&self) -> PyResult<ModelConfig> {
        let c = ModelConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            channels: self.channels,
            patch: self.patch,
            embed_dim: self.embed_dim,
            latent_tokens: self.latent_tokens,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            block_depth: self.block_depth,
            num_classes: self.num_classes,
            recursions: self.recursions,
            latent_steps: self.latent_steps,
            supervision_steps: self.supervision_steps,
            halt_threshold: self.halt_threshold,
            ln_eps: self.ln_eps,
        };
        c.validate().py()?;
        Ok(c)
    }
}

#[pymethods]
impl PyModelConfig {
    /// `preset` is one of `cifar10`, `cifar100`, `micro`.
    #[new]
    #[pyo3(signature = (preset = "cifar10"))]
    fn new(preset: &str) -> PyResult<Self> {
        let c = match preset {
            "cifar10" => ModelConfig::cifar10(),
            "cifar100" => ModelConfig::cifar100(),
            "micro" => ModelConfig::micro(),
            other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
        };
        Ok((&c).into())
    }

    fn validate(&self) -> PyResult<()> {
        self.core().map(|_| ())
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(d={}, heads={}, ffn={}, depth={}, K={}, patch={}, classes={}, T={}, M={}, N={}, tau={})",
            self.embed_dim,
            self.heads,
            self.ffn_hidden,
            self.block_depth,
            self.latent_tokens,
            self.patch,
            self.num_classes,
            self.recursions,
            self.latent_steps,
            self.supervision_steps,
            self.halt_threshold
        )
    }
}

/// `(total, [(name, count), ...])` for a configuration.
#[pyfunction]
fn count_params(config: PyRef<'_, PyModelConfig>) -> PyResult<(usize, Vec<(String, usize)>)> {
    let r = count(&config.core()?);
    Ok((r.total, r.items))
}

/// Learning rate at `step` of a warmup + cosine schedule.
#[pyfunction]
fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, lr_max: f64) -> f64 {
    cosine(step, total_steps, warmup_steps, lr_max)
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: PyRef<'_, PyModelConfig>, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: Model::from_seed(config.core()?, seed).py()?,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        (&self.inner.config).into()
    }

    fn count_params(&self) -> (usize, Vec<(String, usize)>) {
        let r = self.inner.count_params();
        (r.total, r.items)
    }

    /// Shared-block invocations so far.
    #[getter]
    fn block_calls(&self) -> usize {
        self.inner.block_calls()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.count_params().items.into_iter().map(|(n, _)| n).collect()
    }

    /// `(shape, values)` of one named array.
    fn get_param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.lookup(name)?;
        Ok((t.shape().to_vec(), t.to_vec()))
    }

    fn set_param(&self, name: &str, values: Vec<f32>) -> PyResult<()> {
        self.lookup(name)?.assign(&values).py()
    }

    /// Inference from the learned initial state. Returns per-example
    /// `(logits, q)`; `recursions`/`latent_steps` default to the config.
    #[pyo3(signature = (images, batch, recursions = None, latent_steps = None))]
    fn forward(
        &self,
        images: Vec<f32>,
        batch: usize,
        recursions: Option<usize>,
        latent_steps: Option<usize>,
    ) -> PyResult<(Vec<Vec<f32>>, Vec<f32>)> {
        let c = &self.inner.config;
        let tape = Tape::no_grad();
        let (heads, _) = self
            .inner
            .forward(
                &tape,
                &images,
                batch,
                None,
                recursions.unwrap_or(c.recursions),
                latent_steps.unwrap_or(c.latent_steps),
            )
            .py()?;
        let logits = heads.logits.to_vec().chunks(c.num_classes).map(<[f32]>::to_vec).collect();
        Ok((logits, heads.q))
    }

    #[pyo3(signature = (images, batch, recursions = None, latent_steps = None))]
    fn predict(
        &self,
        images: Vec<f32>,
        batch: usize,
        recursions: Option<usize>,
        latent_steps: Option<usize>,
    ) -> PyResult<Vec<usize>> {
        let (logits, _) = self.forward(images, batch, recursions, latent_steps)?;
        Ok(logits.iter().map(|row| vitrm::train::argmax(row)).collect())
    }

    /// Accuracy and losses over labelled images, evaluated in batches.
    #[pyo3(signature = (images, labels, batch_size = 256))]
    fn evaluate(&self, images: Vec<f32>, labels: Vec<usize>, batch_size: usize) -> PyResult<Stats> {
        let c = &self.inner.config;
        let batches = batches(c, &images, &labels, batch_size)?;
        evaluate(&self.inner, batches, c.recursions, c.latent_steps).py().map(Stats::epoch)
    }
}

impl PyModel {
    fn lookup(&self, name: &str) -> PyResult<&Tensor<f32>> {
        let names = self.param_names();
        let i = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named `{name}`")))?;
        Ok(self.inner.params.tensors()[i])
    }
}

fn one_hot(config: &ModelConfig, images: &[f32], labels: &[usize], indices: Vec<usize>) -> PyResult<LabeledBatch> {
    let classes = config.num_classes;
    if images.len() != labels.len() * config.image_len() {
        return Err(PyValueError::new_err(format!(
            "{} labels need {} image values, got {}",
            labels.len(),
            labels.len() * config.image_len(),
            images.len()
        )));
    }
    let mut soft = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(PyValueError::new_err(format!("label {l} out of range for {classes} classes")));
        }
        soft[i * classes + l] = 1.0;
    }
    Ok(LabeledBatch {
        images: images.to_vec(),
        soft_targets: soft,
        hard_labels: labels.to_vec(),
        classes,
        indices,
    })
}

fn batches(config: &ModelConfig, images: &[f32], labels: &[usize], size: usize) -> PyResult<Vec<LabeledBatch>> {
    if size == 0 {
        return Err(PyValueError::new_err("batch_size must be >= 1"));
    }
    one_hot(config, images, labels, Vec::new())?;
    let il = config.image_len();
    (0..labels.len())
        .step_by(size)
        .map(|s| {
            let e = (s + size).min(labels.len());
            one_hot(config, &images[s * il..e * il], &labels[s..e], (s..e).collect())
        })
        .collect()
}

/// Summary of a training step or an evaluation pass.
#[pyclass(name = "Stats", get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
struct Stats {
    loss_total: f64,
    loss_cls: f64,
    loss_halt: f64,
    accuracy: f64,
    mean_q: f64,
    /// Supervision steps taken (training only).
    steps: usize,
}

impl Stats {
    fn epoch(s: EpochStats) -> Self {
        Stats {
            loss_total: s.loss_total,
            loss_cls: s.loss_cls,
            loss_halt: s.loss_halt,
            accuracy: s.accuracy,
            mean_q: s.mean_q,
            steps: 0,
        }
    }

    fn step(s: &StepStats, steps: usize) -> Self {
        Stats {
            loss_total: s.loss_total,
            loss_cls: s.loss_cls,
            loss_halt: s.loss_halt,
            accuracy: s.correct as f64 / s.batch as f64,
            mean_q: s.q_mean,
            steps,
        }
    }
}

#[pymethods]
impl Stats {
    fn __repr__(&self) -> String {
        format!(
            "Stats(loss={:.4}, cls={:.4}, halt={:.4}, acc={:.4}, q={:.3}, steps={})",
            self.loss_total, self.loss_cls, self.loss_halt, self.accuracy, self.mean_q, self.steps
        )
    }
}

/// AdamW + EMA trainer driving the deep-supervision loop.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: Trainer<f32>,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config, seed = 0, lr_max = None, weight_decay = None, ema_decay = None, eval_ema = None))]
    fn new(
        config: PyRef<'_, PyModelConfig>,
        seed: u64,
        lr_max: Option<f64>,
        weight_decay: Option<f64>,
        ema_decay: Option<f64>,
        eval_ema: Option<bool>,
    ) -> PyResult<Self> {
        let d = TrainConfig::default();
        let tc = TrainConfig {
            lr_max: lr_max.unwrap_or(d.lr_max),
            weight_decay: weight_decay.unwrap_or(d.weight_decay),
            ema_decay: ema_decay.unwrap_or(d.ema_decay),
            eval_ema: eval_ema.unwrap_or(d.eval_ema),
            seed,
            augment: AugmentConfig::none(),
            ..d
        };
        let model = Model::from_seed(config.core()?, seed).py()?;
        Ok(PyTrainer {
            inner: Trainer::new(model, tc).py()?,
        })
    }

    /// Deep supervision on one batch: up to `N` forward/backward/update
    /// steps, halting early on the batch-mean `q`. Statistics are those of
    /// the last step taken.
    #[pyo3(signature = (images, labels, lr = None))]
    fn step(&mut self, images: Vec<f32>, labels: Vec<usize>, lr: Option<f64>) -> PyResult<Stats> {
        let batch = one_hot(&self.inner.model.config, &images, &labels, (0..labels.len()).collect())?;
        let lr = lr.unwrap_or(self.inner.config.lr_max);
        let out = self.inner.deep_supervision(&batch, lr).py()?;
        Ok(Stats::step(out.last(), out.steps_used()))
    }

    /// Optimizer updates applied so far.
    #[getter]
    fn optimizer_steps(&self) -> u64 {
        self.inner.opt.state.step
    }

    /// Copy of the current raw weights.
    fn model(&self) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: self.inner.model.with_weights(&self.inner.model.params.snapshot()).py()?,
        })
    }

    /// Copy of the model used for reporting (the EMA shadow unless disabled).
    fn eval_model(&self) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: self.inner.eval_model().py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_trainer(&self.inner, None).save(&path).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::<f32>::load(&path).py()?;
        Ok(PyTrainer {
            inner: ck.into_trainer().py()?,
        })
    }
}

/// Read-only view of a checkpoint file.
#[pyclass(name = "Checkpoint", unsendable)]
struct PyCheckpoint {
    inner: Checkpoint<f32>,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::load(&path).py()?,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        (&self.inner.model).into()
    }

    #[getter]
    fn epochs_done(&self) -> usize {
        self.inner.progress.epochs_done
    }

    #[getter]
    fn optimizer_steps(&self) -> u64 {
        self.inner.opt.step
    }

    /// Validation accuracy per completed epoch.
    #[getter]
    fn history(&self) -> Vec<f64> {
        self.inner.progress.history.clone()
    }

    /// Model over the EMA shadow (`ema=True`) or the raw weights.
    #[pyo3(signature = (ema = true))]
    fn model(&self, ema: bool) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: self.inner.eval_model(ema).py()?,
        })
    }
}

#[pymodule]
fn _vitrm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<Stats>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    Ok(())
}
