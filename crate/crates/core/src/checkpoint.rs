//! Single-file checkpoints: magic, format version, a JSON header with a
//! manifest of named arrays, then one little-endian payload.
//!
//! ```text
//! b"VITRMCKP" | u32 version | u64 header length | header JSON | payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig, ModelParams};
use crate::tensor::{DType, Scalar};
use crate::train::{AdamW, EmaState, OptimizerState, Progress, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"VITRMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    stats: Option<ChannelStats>,
    progress: Progress,
    opt_step: u64,
    arrays: Vec<ArrayEntry>,
    payload_bytes: u64,
    payload_sha256: String,
}

/// Everything needed to resume a run or evaluate its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Normalization the weights were trained under.
    pub stats: Option<ChannelStats>,
    pub progress: Progress,
    /// Canonical parameter order.
    pub params: Vec<Vec<T>>,
    pub opt: OptimizerState<T>,
    pub ema: Vec<Vec<T>>,
}

const GROUPS: [&str; 4] = ["param", "opt.m", "opt.v", "ema"];

impl<T: Scalar> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>, stats: Option<ChannelStats>) -> Self {
        Checkpoint {
            model: trainer.model.config.clone(),
            train: trainer.config.clone(),
            stats,
            progress: trainer.progress.clone(),
            params: trainer.model.params.snapshot(),
            opt: trainer.opt.state.clone(),
            ema: trainer.ema.shadow.clone(),
        }
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let params = ModelParams::from_flat(&self.model, &self.params, true)?;
        let model = Model::new(self.model.clone(), params)?;
        self.train.validate()?;
        Ok(Trainer {
            opt: AdamW::with_state(&self.model, self.train.adamw(), self.opt),
            ema: EmaState { shadow: self.ema },
            model,
            config: self.train,
            progress: self.progress,
        })
    }

    /// Untracked model over the EMA shadow (`ema = true`) or the raw weights.
    pub fn eval_model(&self, ema: bool) -> Result<Model<T>> {
        let values = if ema { &self.ema } else { &self.params };
        Model::new(self.model.clone(), ModelParams::from_flat(&self.model, values, false)?)
    }

    fn groups(&self) -> [&Vec<Vec<T>>; 4] {
        [&self.params, &self.opt.m, &self.opt.v, &self.ema]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let specs = param_specs(&self.model);
        let mut payload = Vec::new();
        let mut arrays = Vec::new();
        for (group, values) in GROUPS.iter().zip(self.groups()) {
            if values.len() != specs.len() {
                return Err(Error::Checkpoint(format!(
                    "{group}: {} arrays for {} parameters",
                    values.len(),
                    specs.len()
                )));
            }
            for (spec, v) in specs.iter().zip(values) {
                if v.len() != spec.numel() {
                    return Err(Error::Checkpoint(format!(
                        "{group}/{}: {} values for shape {:?}",
                        spec.name,
                        v.len(),
                        spec.shape
                    )));
                }
                arrays.push(ArrayEntry {
                    name: format!("{group}/{}", spec.name),
                    shape: spec.shape.clone(),
                    dtype: T::DTYPE,
                    offset: payload.len() as u64,
                });
                v.iter().for_each(|x| x.to_le_bytes_into(&mut payload));
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            stats: self.stats,
            progress: self.progress.clone(),
            opt_step: self.opt.step,
            arrays,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file")));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("header format version {}", header.format_version)));
        }
        header.model.validate()?;
        let payload = &body[hlen..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(bad(format!(
                "payload is {} bytes, header declares {} (truncated or trailing bytes)",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload digest mismatch".into()));
        }

        let specs = param_specs(&header.model);
        if header.arrays.len() != GROUPS.len() * specs.len() {
            return Err(bad(format!(
                "{} arrays in manifest, config needs {}",
                header.arrays.len(),
                GROUPS.len() * specs.len()
            )));
        }
        let width = T::DTYPE.size_of();
        let mut cursor = 0u64;
        let mut groups: Vec<Vec<Vec<T>>> = Vec::new();
        let mut entries = header.arrays.iter();
        for group in GROUPS {
            let mut arrays = Vec::with_capacity(specs.len());
            for spec in &specs {
                let e = entries.next().expect("length checked");
                let name = format!("{group}/{}", spec.name);
                if e.name != name || e.shape != spec.shape {
                    return Err(bad(format!(
                        "manifest entry `{}` {:?} does not match `{name}` {:?}",
                        e.name, e.shape, spec.shape
                    )));
                }
                if e.dtype != T::DTYPE {
                    return Err(bad(format!("`{name}` stored as {:?}, reading as {:?}", e.dtype, T::DTYPE)));
                }
                if e.offset != cursor {
                    return Err(bad(format!("`{name}` at offset {}, expected {cursor}", e.offset)));
                }
                let n = spec.numel() * width;
                let raw = &payload[cursor as usize..cursor as usize + n];
                arrays.push(raw.chunks_exact(width).map(T::from_le_slice).collect());
                cursor += n as u64;
            }
            groups.push(arrays);
        }
        if cursor != header.payload_bytes {
            return Err(bad(format!("{} unreferenced payload bytes", header.payload_bytes - cursor)));
        }
        let mut it = groups.into_iter();
        let (params, m, v, ema) = (
            it.next().expect("4 groups"),
            it.next().expect("4 groups"),
            it.next().expect("4 groups"),
            it.next().expect("4 groups"),
        );
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            stats: header.stats,
            progress: header.progress,
            params,
            opt: OptimizerState {
                m,
                v,
                step: header.opt_step,
            },
            ema,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
