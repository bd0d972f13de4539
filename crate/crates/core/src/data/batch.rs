use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_geometric, cutmix, mixup};
use super::cifar::{ImageRecord, IMAGE_BYTES};
use super::stats::{normalize, ChannelStats};
use crate::error::{Error, Result};
use crate::train::argmax;

/// Normalized images with (possibly mixed) soft targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    /// `[B, 3, 32, 32]`
    pub images: Vec<f32>,
    /// `[B, C]`, each row sums to 1.
    pub soft_targets: Vec<f32>,
    /// Dominant label per row: argmax of the soft target, lowest index on ties.
    pub hard_labels: Vec<usize>,
    pub classes: usize,
    /// Dataset indices of the un-mixed examples, in batch order.
    pub indices: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }

    fn refresh_hard_labels(&mut self) {
        self.hard_labels = self.soft_targets.chunks_exact(self.classes).map(argmax).collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Pad-crop-flip on every training image.
    pub geometric: bool,
    /// Per batch: mixup with probability 0.25, cutmix with 0.25, else none.
    pub mix: bool,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            geometric: true,
            mix: true,
            mixup_alpha: 0.2,
            cutmix_alpha: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            geometric: false,
            mix: false,
            ..AugmentConfig::default()
        }
    }
}

/// Which of the two mixing methods a batch received.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mix {
    None,
    Mixup,
    CutMix,
}

const SHUFFLE_STREAM: u64 = u32::MAX as u64;

fn stream_rng(seed: u64, epoch: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | lane);
    rng
}

/// Visiting order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, epoch, SHUFFLE_STREAM));
    order
}

fn one_hot(classes: usize, label: usize) -> impl Iterator<Item = f32> {
    (0..classes).map(move |c| if c == label { 1.0 } else { 0.0 })
}

fn assemble(
    records: &[ImageRecord],
    indices: &[usize],
    classes: usize,
    stats: &ChannelStats,
    mut transform: impl FnMut(Vec<f32>) -> Vec<f32>,
) -> LabeledBatch {
    let mut images = Vec::with_capacity(indices.len() * IMAGE_BYTES);
    let mut soft_targets = Vec::with_capacity(indices.len() * classes);
    for &i in indices {
        let mut img = transform(records[i].unit_pixels());
        normalize(&mut img, stats);
        images.extend_from_slice(&img);
        soft_targets.extend(one_hot(classes, records[i].label()));
    }
    let mut b = LabeledBatch {
        images,
        soft_targets,
        hard_labels: Vec::new(),
        classes,
        indices: indices.to_vec(),
    };
    b.refresh_hard_labels();
    b
}

/// Shuffled, augmented training batches. Batch `b` of epoch `e` depends only
/// on `(seed, e, b)` and the records; the last partial batch is kept.
pub struct TrainBatches<'a> {
    records: &'a [ImageRecord],
    order: Vec<usize>,
    batch_size: usize,
    classes: usize,
    stats: ChannelStats,
    augment: AugmentConfig,
    seed: u64,
    epoch: u64,
    next: usize,
}

impl<'a> TrainBatches<'a> {
    pub fn new(
        records: &'a [ImageRecord],
        classes: usize,
        stats: ChannelStats,
        batch_size: usize,
        augment: AugmentConfig,
        seed: u64,
        epoch: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(TrainBatches {
            records,
            order: epoch_order(records.len(), seed, epoch),
            batch_size,
            classes,
            stats,
            augment,
            seed,
            epoch,
            next: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.records.len().div_ceil(self.batch_size)
    }

    /// Builds batch `index` of this epoch, returning which mix it received.
    pub fn batch(&self, index: usize) -> Option<(LabeledBatch, Mix)> {
        let start = index * self.batch_size;
        if start >= self.order.len() {
            return None;
        }
        let idx = &self.order[start..(start + self.batch_size).min(self.order.len())];
        let mut rng = stream_rng(self.seed, self.epoch, index as u64);
        let geometric = self.augment.geometric;
        let mut b = assemble(self.records, idx, self.classes, &self.stats, |img| {
            if geometric {
                augment_geometric(&img, &mut rng)
            } else {
                img
            }
        });
        let mut mix = Mix::None;
        if self.augment.mix {
            let u: f64 = rng.random();
            let c = b.classes;
            if u < 0.25 {
                mixup(&mut b.images, &mut b.soft_targets, c, self.augment.mixup_alpha, &mut rng);
                mix = Mix::Mixup;
            } else if u < 0.5 {
                cutmix(&mut b.images, &mut b.soft_targets, c, self.augment.cutmix_alpha, &mut rng);
                mix = Mix::CutMix;
            }
            b.refresh_hard_labels();
        }
        Some((b, mix))
    }
}

impl Iterator for TrainBatches<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        let out = self.batch(self.next).map(|(b, _)| b);
        self.next += 1;
        out
    }
}

/// Evaluation batches in dataset order, normalization only.
pub fn eval_batches<'a>(
    records: &'a [ImageRecord],
    classes: usize,
    stats: ChannelStats,
    batch_size: usize,
) -> impl Iterator<Item = LabeledBatch> + 'a {
    let bs = batch_size.max(1);
    let all: Vec<usize> = (0..records.len()).collect();
    (0..records.len().div_ceil(bs)).map(move |b| {
        let idx = &all[b * bs..((b + 1) * bs).min(all.len())];
        assemble(records, idx, classes, &stats, |img| img)
    })
}
