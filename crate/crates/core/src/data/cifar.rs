use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

/// A downloadable archive together with its published size and digest.
#[derive(Debug, Clone, Copy)]
pub struct Archive {
    pub url: &'static str,
    pub file_name: &'static str,
    pub size: u64,
    pub sha256: &'static str,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Label bytes + pixel bytes.
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + IMAGE_BYTES,
            CifarVariant::Cifar100 => 2 + IMAGE_BYTES,
        }
    }

    /// Directory the archive extracts to.
    pub fn subdir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }

    /// `(file name, record count)` for the training split.
    pub fn train_files(self) -> Vec<(String, usize)> {
        match self {
            CifarVariant::Cifar10 => (1..=5).map(|i| (format!("data_batch_{i}.bin"), 10_000)).collect(),
            CifarVariant::Cifar100 => vec![("train.bin".into(), 50_000)],
        }
    }

    pub fn test_files(self) -> Vec<(String, usize)> {
        vec![("test_batch.bin".into(), 10_000)]
            .into_iter()
            .map(|(n, c)| match self {
                CifarVariant::Cifar10 => (n, c),
                CifarVariant::Cifar100 => ("test.bin".into(), c),
            })
            .collect()
    }

    pub fn archive(self) -> Archive {
        match self {
            CifarVariant::Cifar10 => Archive {
                url: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
                file_name: "cifar-10-binary.tar.gz",
                size: 170_052_171,
                sha256: "c4a38c50a1bc5f3a1c5537f2155ab9d68f9f25eb1ed8d9ddda3db29a59bca1dd",
            },
            CifarVariant::Cifar100 => Archive {
                url: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
                file_name: "cifar-100-binary.tar.gz",
                size: 168_513_733,
                sha256: "58a81ae192c23a4be8b1804d68e518ed807d710a4eb253b1f2a199162a40d8ec",
            },
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            _ => Err(Error::config("dataset", format!("unknown dataset `{s}` (cifar10 | cifar100)"))),
        }
    }
}

/// One image as stored on disk: `R`, `G`, `B` planes, each 32×32 row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub pixels: Vec<u8>,
    pub fine_label: u8,
    pub coarse_label: Option<u8>,
}

impl ImageRecord {
    pub fn label(&self) -> usize {
        self.fine_label as usize
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn unit_pixels(&self) -> Vec<f32> {
        self.pixels.iter().map(|&b| b as f32 / 255.0).collect()
    }

    /// The record in its on-disk layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + IMAGE_BYTES);
        if let Some(c) = self.coarse_label {
            out.push(c);
        }
        out.push(self.fine_label);
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses a whole file. `expected` records, if given, pins the file size.
pub fn parse_records(bytes: &[u8], variant: CifarVariant, file: &Path, expected: Option<usize>) -> Result<Vec<ImageRecord>> {
    let rl = variant.record_len();
    let err = |offset: usize, reason: String| Error::Ingestion {
        file: file.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if let Some(n) = expected {
        if bytes.len() != n * rl {
            return Err(err(
                bytes.len().min(n * rl),
                format!("expected {} bytes ({n} records of {rl}), got {}", n * rl, bytes.len()),
            ));
        }
    } else if !bytes.len().is_multiple_of(rl) {
        return Err(err(
            bytes.len() - bytes.len() % rl,
            format!("size {} is not a multiple of the {rl}-byte record", bytes.len()),
        ));
    }
    let classes = variant.num_classes();
    bytes
        .chunks_exact(rl)
        .enumerate()
        .map(|(i, rec)| {
            let (coarse, fine, pixels) = match variant {
                CifarVariant::Cifar10 => (None, rec[0], &rec[1..]),
                CifarVariant::Cifar100 => (Some(rec[0]), rec[1], &rec[2..]),
            };
            if fine as usize >= classes {
                return Err(err(i * rl, format!("label {fine} outside [0, {classes})")));
            }
            if let Some(c) = coarse.filter(|&c| c >= 20) {
                return Err(err(i * rl, format!("coarse label {c} outside [0, 20)")));
            }
            Ok(ImageRecord {
                pixels: pixels.to_vec(),
                fine_label: fine,
                coarse_label: coarse,
            })
        })
        .collect()
}

/// Accepts either the directory holding the `.bin` files or its parent.
pub fn resolve_dir(dir: &Path, variant: CifarVariant) -> PathBuf {
    let nested = dir.join(variant.subdir());
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn load_files(dir: &Path, variant: CifarVariant, files: &[(String, usize)]) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for (name, count) in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::Ingestion {
            file: path.clone(),
            offset: 0,
            reason: format!("cannot read: {e}"),
        })?;
        out.extend(parse_records(&bytes, variant, &path, Some(*count))?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CifarSplits {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// Reads the standard binary distribution: 50,000 training and 10,000 test
/// records.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<CifarSplits> {
    let dir = resolve_dir(dir, variant);
    Ok(CifarSplits {
        train: load_files(&dir, variant, &variant.train_files())?,
        test: load_files(&dir, variant, &variant.test_files())?,
    })
}
