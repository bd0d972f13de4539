//! CIFAR binary ingestion, normalization, augmentation and batching.

mod augment;
mod batch;
mod cifar;
mod stats;

pub use augment::{augment_geometric, augment_with, cutmix, cutmix_with, mixup, mixup_with, CutBox, PAD};
pub use batch::{epoch_order, eval_batches, AugmentConfig, LabeledBatch, Mix, TrainBatches};
pub use cifar::{
    load_cifar, parse_records, resolve_dir, Archive, CifarSplits, CifarVariant, ImageRecord, CHANNELS, IMAGE_BYTES,
    IMAGE_SIDE,
};
pub use stats::{normalize, ChannelStats};
