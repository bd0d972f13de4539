use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

/// Static description of one trainable array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Receives decoupled weight decay. False for biases and norm affine terms.
    pub decay: bool,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        let decay = init == Init::TruncNormal;
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            decay,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every trainable array of the model, in canonical order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let f = cfg.ffn_hidden;
    let mut specs = vec![
        ParamSpec::new("patch.weight", &[d, cfg.patch_dim()], Init::TruncNormal),
        ParamSpec::new("patch.bias", &[1, d], Init::Zeros),
        ParamSpec::new("pos_embed", &[cfg.num_patches(), d], Init::TruncNormal),
    ];
    for i in 0..cfg.block_depth {
        let p = |s: &str| format!("block.{i}.{s}");
        specs.extend([
            ParamSpec::new(p("ln1.gamma"), &[1, d], Init::Ones),
            ParamSpec::new(p("ln1.beta"), &[1, d], Init::Zeros),
            ParamSpec::new(p("attn.q.weight"), &[d, d], Init::TruncNormal),
            ParamSpec::new(p("attn.q.bias"), &[1, d], Init::Zeros),
            ParamSpec::new(p("attn.k.weight"), &[d, d], Init::TruncNormal),
            ParamSpec::new(p("attn.k.bias"), &[1, d], Init::Zeros),
            ParamSpec::new(p("attn.v.weight"), &[d, d], Init::TruncNormal),
            ParamSpec::new(p("attn.v.bias"), &[1, d], Init::Zeros),
            ParamSpec::new(p("attn.out.weight"), &[d, d], Init::TruncNormal),
            ParamSpec::new(p("attn.out.bias"), &[1, d], Init::Zeros),
            ParamSpec::new(p("ln2.gamma"), &[1, d], Init::Ones),
            ParamSpec::new(p("ln2.beta"), &[1, d], Init::Zeros),
            ParamSpec::new(p("ffn.fc1.weight"), &[f, d], Init::TruncNormal),
            ParamSpec::new(p("ffn.fc1.bias"), &[1, f], Init::Zeros),
            ParamSpec::new(p("ffn.fc2.weight"), &[d, f], Init::TruncNormal),
            ParamSpec::new(p("ffn.fc2.bias"), &[1, d], Init::Zeros),
        ]);
    }
    specs.extend([
        ParamSpec::new("y_init", &[1, d], Init::TruncNormal),
        ParamSpec::new("z_init", &[cfg.latent_tokens, d], Init::TruncNormal),
        ParamSpec::new("head.cls.weight", &[cfg.num_classes, d], Init::TruncNormal),
        ParamSpec::new("head.cls.bias", &[1, cfg.num_classes], Init::Zeros),
        ParamSpec::new("head.halt.weight", &[1, d], Init::TruncNormal),
        ParamSpec::new("head.halt.bias", &[1, 1], Init::Zeros),
    ]);
    specs
}

#[derive(Debug, Clone)]
pub struct LayerParams<T: Scalar> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// All weights. The block layers are stored once and read by every
/// recursion step, so weight sharing is a property of the data structure.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub y_init: Tensor<T>,
    pub z_init: Tensor<T>,
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
    pub halt_w: Tensor<T>,
    pub halt_b: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Builds every array through `make`, called once per spec in canonical order.
    pub fn build(cfg: &ModelConfig, mut make: impl FnMut(&ParamSpec) -> Result<Tensor<T>>) -> Result<Self> {
        let specs = param_specs(cfg);
        let mut it = specs.iter();
        let mut next = || -> Result<Tensor<T>> {
            let spec = it.next().expect("spec count matches field count");
            let t = make(spec)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Dimension {
                    op: "ModelParams::build",
                    lhs: spec.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        let patch_w = next()?;
        let patch_b = next()?;
        let pos_embed = next()?;
        let mut layers = Vec::with_capacity(cfg.block_depth);
        for _ in 0..cfg.block_depth {
            layers.push(LayerParams {
                ln1_gamma: next()?,
                ln1_beta: next()?,
                wq: next()?,
                bq: next()?,
                wk: next()?,
                bk: next()?,
                wv: next()?,
                bv: next()?,
                wo: next()?,
                bo: next()?,
                ln2_gamma: next()?,
                ln2_beta: next()?,
                w1: next()?,
                b1: next()?,
                w2: next()?,
                b2: next()?,
            });
        }
        Ok(ModelParams {
            patch_w,
            patch_b,
            pos_embed,
            layers,
            y_init: next()?,
            z_init: next()?,
            cls_w: next()?,
            cls_b: next()?,
            halt_w: next()?,
            halt_b: next()?,
        })
    }

    /// Fresh tracked parameters.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Self::build(cfg, |spec| {
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); spec.numel()],
                Init::Ones => vec![T::one(); spec.numel()],
                Init::TruncNormal => (0..spec.numel())
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break T::lit(v);
                        }
                    })
                    .collect(),
            };
            Tensor::param(&spec.shape, data)
        })
    }

    /// Parameters from named arrays (checkpoint or EMA shadow).
    pub fn from_arrays(cfg: &ModelConfig, arrays: &BTreeMap<String, Vec<T>>, tracked: bool) -> Result<Self> {
        Self::build(cfg, |spec| {
            let data = arrays
                .get(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{}`", spec.name)))?;
            if data.len() != spec.numel() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has {} values, expected shape {:?}",
                    spec.name,
                    data.len(),
                    spec.shape
                )));
            }
            if tracked {
                Tensor::param(&spec.shape, data.clone())
            } else {
                Tensor::new(&spec.shape, data.clone())
            }
        })
    }

    /// Untracked copy over the given flat values, one vector per tensor in
    /// canonical order.
    pub fn from_flat(cfg: &ModelConfig, values: &[Vec<T>], tracked: bool) -> Result<Self> {
        let mut it = values.iter();
        Self::build(cfg, |spec| {
            let data = it
                .next()
                .ok_or_else(|| Error::Validation("too few arrays".into()))?
                .clone();
            if tracked {
                Tensor::param(&spec.shape, data)
            } else {
                Tensor::new(&spec.shape, data)
            }
        })
    }

    /// Handles to every trainable tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.pos_embed];
        for l in &self.layers {
            out.extend([
                &l.ln1_gamma, &l.ln1_beta, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln2_gamma,
                &l.ln2_beta, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.extend([&self.y_init, &self.z_init, &self.cls_w, &self.cls_b, &self.halt_w, &self.halt_b]);
        out
    }

    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.tensors().into_iter().map(Tensor::to_vec).collect()
    }

    pub fn zero_grad(&self) {
        self.tensors().into_iter().for_each(Tensor::zero_grad);
    }
}

/// Itemized scalar parameter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub items: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamReport {
    /// Per-component subtotals: patch projection, positional table, each
    /// block layer, initial states, and the two heads.
    pub fn components(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, n) in &self.items {
            let key = match name.split('.').collect::<Vec<_>>().as_slice() {
                ["block", i, ..] => format!("block.{i}"),
                ["head", h, ..] => format!("head.{h}"),
                [first, ..] => first.to_string(),
                [] => unreachable!("names are non-empty"),
            };
            match groups.last_mut() {
                Some((k, total)) if *k == key => *total += n,
                _ => groups.push((key, *n)),
            }
        }
        groups
    }
}

pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let items: Vec<(String, usize)> = param_specs(cfg).into_iter().map(|s| {
        let n = s.numel();
        (s.name, n)
    }).collect();
    let total = items.iter().map(|(_, n)| n).sum();
    ParamReport { items, total }
}
