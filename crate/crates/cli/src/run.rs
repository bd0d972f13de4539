//! The train, eval and ablate commands as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vitrm::checkpoint::Checkpoint;
use vitrm::data::{epoch_order, eval_batches, load_cifar, ChannelStats, CifarVariant, ImageRecord};
use vitrm::metrics::{read_metrics, MetricRecord, MetricsWriter, Split};
use vitrm::model::Model;
use vitrm::train::{evaluate, EpochStats, Trainer};

use crate::settings::Settings;

pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const SUMMARY: &str = "summary.json";

/// Subset selection uses its own shuffle lane, independent of epoch order.
const SUBSET_LANE: u64 = u32::MAX as u64;

pub struct Dataset {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub stats: ChannelStats,
}

#[derive(Serialize, Deserialize)]
struct StatsCache {
    train_records: usize,
    stats: ChannelStats,
}

/// Channel statistics over the full training split, cached next to the data.
pub fn channel_stats(root: &Path, variant: CifarVariant, train: &[ImageRecord]) -> Result<ChannelStats> {
    let path = root.join(format!("vitrm-stats-{}.json", variant.subdir()));
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(c) = serde_json::from_str::<StatsCache>(&text) {
            if c.train_records == train.len() && c.stats.validate().is_ok() {
                return Ok(c.stats);
            }
        }
    }
    let stats = ChannelStats::compute(train)?;
    let cache = StatsCache {
        train_records: train.len(),
        stats,
    };
    if let Err(e) = fs::write(&path, serde_json::to_string_pretty(&cache)?) {
        eprintln!("note: could not cache channel statistics at {}: {e}", path.display());
    }
    Ok(stats)
}

pub fn load_dataset(root: &Path, s: &Settings) -> Result<Dataset> {
    let splits = load_cifar(root, s.dataset).with_context(|| format!("loading {:?} from {}", s.dataset, root.display()))?;
    let stats = channel_stats(root, s.dataset, &splits.train)?;
    let train = match s.subset {
        Some(n) if n < splits.train.len() => epoch_order(splits.train.len(), s.train.seed, SUBSET_LANE)
            .into_iter()
            .take(n)
            .map(|i| splits.train[i].clone())
            .collect(),
        _ => splits.train,
    };
    let mut val = splits.test;
    if let Some(n) = s.val_subset {
        val.truncate(n);
    }
    Ok(Dataset { train, val, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    /// One-based.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    pub history: Vec<f64>,
    pub optimizer_steps: u64,
}

/// Trains under `out`, writing `metrics.jsonl`, `best.ckpt`, `last.ckpt`,
/// `config.txt` and `summary.json`. With `resume`, continues from
/// `last.ckpt` when it exists.
pub fn train(settings: &Settings, data: &Dataset, out: &Path, resume: bool) -> Result<RunSummary> {
    settings.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), settings.to_text())?;
    let last = out.join(LAST);
    let mut trainer = if resume && last.exists() {
        let ck = Checkpoint::<f32>::load(&last)?;
        if ck.model != settings.model {
            bail!("{}: model configuration differs from the requested one", last.display());
        }
        let done = ck.progress.epochs_done;
        eprintln!("resuming from {} after epoch {done}", last.display());
        // drop records from an epoch whose checkpoint never landed
        let metrics = out.join(METRICS);
        if metrics.exists() {
            let kept: Vec<MetricRecord> = read_metrics(&metrics)?.into_iter().filter(|r| r.epoch <= done).collect();
            let mut text = String::new();
            for r in &kept {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(&metrics, text)?;
        }
        let mut t = ck.into_trainer()?;
        t.config = settings.train.clone();
        t.opt.config = settings.train.adamw();
        t
    } else {
        if out.join(METRICS).exists() {
            fs::remove_file(out.join(METRICS))?;
        }
        Trainer::new(Model::from_seed(settings.model.clone(), settings.train.seed)?, settings.train.clone())?
    };
    let mut metrics = MetricsWriter::append(&out.join(METRICS))?;
    let stats = data.stats;
    trainer.fit(&data.train, &data.val, stats, |t, r| {
        metrics.write(&MetricRecord::new(r.epoch, Split::Train, &r.train))?;
        metrics.write(&MetricRecord::new(r.epoch, Split::Val, &r.val))?;
        let ck = Checkpoint::from_trainer(t, Some(stats));
        ck.save(&last)?;
        if r.improved {
            ck.save(&out.join(BEST))?;
        }
        eprintln!(
            "epoch {:>4}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}  lr {:.2e}  q {:.3}  steps {:.2}  {:.1}s",
            r.epoch,
            r.train.loss_total,
            r.train.accuracy,
            r.val.loss_total,
            r.val.accuracy,
            r.train.lr,
            r.train.mean_q,
            r.train.supervision_steps_used,
            r.train.wall_seconds + r.val.wall_seconds
        );
        Ok(())
    })?;
    let p = &trainer.progress;
    let summary = RunSummary {
        epochs: p.epochs_done,
        best_epoch: p.best_epoch.map(|e| e + 1),
        best_val_accuracy: p.best_accuracy,
        final_val_accuracy: p.history.last().copied(),
        history: p.history.clone(),
        optimizer_steps: trainer.opt.state.step,
    };
    fs::write(out.join(SUMMARY), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub recursions: Option<usize>,
    pub latent_steps: Option<usize>,
    pub ema: bool,
    pub batch_size: usize,
    pub limit: Option<usize>,
    pub split: Split,
}

pub fn variant_of(num_classes: usize) -> Result<CifarVariant> {
    match num_classes {
        10 => Ok(CifarVariant::Cifar10),
        100 => Ok(CifarVariant::Cifar100),
        n => bail!("checkpoint has {n} classes; no matching CIFAR variant"),
    }
}

/// Accuracy of a checkpoint with exactly `T` recursion steps per example.
pub fn eval(checkpoint: &Path, root: &Path, opts: &EvalOptions) -> Result<EpochStats> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let variant = variant_of(ck.model.num_classes)?;
    let splits = load_cifar(root, variant)?;
    let stats = match ck.stats {
        Some(s) => s,
        None => channel_stats(root, variant, &splits.train)?,
    };
    let mut records = match opts.split {
        Split::Train => splits.train,
        Split::Val | Split::Test => splits.test,
    };
    if let Some(n) = opts.limit {
        records.truncate(n);
    }
    let model = ck.eval_model(opts.ema)?;
    let t = opts.recursions.unwrap_or(model.config.recursions);
    let m = opts.latent_steps.unwrap_or(model.config.latent_steps);
    Ok(evaluate(&model, eval_batches(&records, model.config.num_classes, stats, opts.batch_size), t, m)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Smoke,
    Full,
}

impl Scale {
    /// Defaults applied before any config file or flag.
    pub fn defaults(self, s: &mut Settings) {
        s.train.batch_size = ABLATION_BATCH;
        match self {
            Scale::Smoke => {
                s.subset = Some(1000);
                s.val_subset = Some(500);
                s.train.max_epochs = 2;
            }
            Scale::Full => {}
        }
    }
}

pub const ABLATION_BATCH: usize = 128;
pub const GRID_SUPERVISION: [usize; 5] = [1, 2, 4, 8, 16];
pub const GRID_LATENT: [usize; 4] = [1, 2, 3, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub supervision_steps: usize,
    pub latent_steps: usize,
    pub accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub scale: Scale,
    pub batch_size: usize,
    pub cells: Vec<Cell>,
    pub warnings: Vec<String>,
}

fn cell_dir(out: &Path, n: usize, m: usize) -> PathBuf {
    out.join(format!("N{n}_M{m}"))
}

/// Runs every `(N, M)` cell as a full train + eval. Finished cells (with a
/// `summary.json`) are reused; a failing cell is recorded and skipped.
pub fn ablate(
    base: &Settings,
    data: &Dataset,
    out: &Path,
    scale: Scale,
    grid_n: &[usize],
    grid_m: &[usize],
) -> Result<AblationReport> {
    fs::create_dir_all(out)?;
    let mut cells = Vec::new();
    for &m in grid_m {
        for &n in grid_n {
            let dir = cell_dir(out, n, m);
            let mut s = base.clone();
            s.model.supervision_steps = n;
            s.model.latent_steps = m;
            let done = fs::read_to_string(dir.join(SUMMARY))
                .ok()
                .and_then(|t| serde_json::from_str::<RunSummary>(&t).ok());
            let result = match done {
                Some(summary) => {
                    eprintln!("cell N={n} M={m}: reusing finished run");
                    Ok(summary)
                }
                None => {
                    eprintln!("cell N={n} M={m}: training");
                    train(&s, data, &dir, true)
                }
            };
            cells.push(match result {
                Ok(r) => Cell {
                    supervision_steps: n,
                    latent_steps: m,
                    accuracy: r.best_val_accuracy,
                    best_epoch: r.best_epoch,
                    epochs: Some(r.epochs),
                    error: None,
                },
                Err(e) => {
                    eprintln!("cell N={n} M={m} failed: {e:#}");
                    Cell {
                        supervision_steps: n,
                        latent_steps: m,
                        accuracy: None,
                        best_epoch: None,
                        epochs: None,
                        error: Some(format!("{e:#}")),
                    }
                }
            });
        }
    }
    let warnings = if scale == Scale::Smoke { trend_warnings(&cells) } else { Vec::new() };
    let report = AblationReport {
        scale,
        batch_size: base.train.batch_size,
        cells,
        warnings,
    };
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("ablation.tsv"), table(&report))?;
    Ok(report)
}

/// Soft check on the direction of the supervision-depth effect: at each
/// latent depth, the deepest supervision cell should not beat `N = 1`.
pub fn trend_warnings(cells: &[Cell]) -> Vec<String> {
    let acc = |n: usize, m: usize| {
        cells
            .iter()
            .find(|c| c.supervision_steps == n && c.latent_steps == m)
            .and_then(|c| c.accuracy)
    };
    let deepest = cells.iter().map(|c| c.supervision_steps).max().unwrap_or(1);
    let mut ms: Vec<usize> = cells.iter().map(|c| c.latent_steps).collect();
    ms.sort_unstable();
    ms.dedup();
    ms.into_iter()
        .filter_map(|m| match (acc(1, m), acc(deepest, m)) {
            (Some(a1), Some(ad)) if deepest > 1 && ad > a1 => Some(format!(
                "M={m}: N={deepest} accuracy {ad:.4} exceeds N=1 accuracy {a1:.4}"
            )),
            _ => None,
        })
        .collect()
}

/// Accuracy table: one row per latent depth, one column per supervision depth.
pub fn table(report: &AblationReport) -> String {
    let mut ns: Vec<usize> = report.cells.iter().map(|c| c.supervision_steps).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut ms: Vec<usize> = report.cells.iter().map(|c| c.latent_steps).collect();
    ms.sort_unstable();
    ms.dedup();
    let mut s = String::from("M\\N");
    ns.iter().for_each(|n| s.push_str(&format!("\t{n}")));
    s.push('\n');
    for m in ms {
        s.push_str(&m.to_string());
        for &n in &ns {
            let cell = report.cells.iter().find(|c| c.supervision_steps == n && c.latent_steps == m);
            match cell.and_then(|c| c.accuracy) {
                Some(a) => s.push_str(&format!("\t{a:.4}")),
                None => s.push_str("\tfailed"),
            }
        }
        s.push('\n');
    }
    s
}
