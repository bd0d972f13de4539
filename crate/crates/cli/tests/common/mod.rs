#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitrm::data::{CifarVariant, IMAGE_BYTES};

/// Writes a full-size CIFAR binary tree under `root` (the extracted archive
/// layout). Class `c` images are noise around a per-class mean colour so
/// the set is learnable; `zeros` writes all-zero pixels instead.
pub fn write_cifar(root: &Path, variant: CifarVariant, zeros: bool) {
    let dir = root.join(variant.subdir());
    fs::create_dir_all(&dir).unwrap();
    let classes = variant.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (f, (name, n)) in variant.train_files().into_iter().chain(variant.test_files()).enumerate() {
        let mut bytes = Vec::with_capacity(n * variant.record_len());
        for i in 0..n {
            let label = (i * 7 + f) % classes;
            if variant == CifarVariant::Cifar100 {
                bytes.push((label % 20) as u8);
            }
            bytes.push(label as u8);
            if zeros {
                bytes.resize(bytes.len() + IMAGE_BYTES, 0);
            } else {
                for c in 0..3 {
                    let base = ((label * 37 + c * 71) % 200) as i32 + 20;
                    bytes.extend((0..IMAGE_BYTES / 3).map(|_| (base + rng.random_range(-20..=20)) as u8));
                }
            }
        }
        fs::write(dir.join(name), bytes).unwrap();
    }
}

/// A model small enough to run end to end in a test, as `--set` pairs.
pub const TINY: &[(&str, &str)] = &[
    ("patch", "8"),
    ("embed_dim", "16"),
    ("latent_tokens", "2"),
    ("heads", "2"),
    ("ffn_hidden", "32"),
    ("block_depth", "1"),
    ("eval_batch_size", "128"),
];

pub fn tiny_args() -> Vec<String> {
    TINY.iter().flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")]).collect()
}
