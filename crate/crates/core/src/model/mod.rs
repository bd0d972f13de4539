//! The recursive classifier: patch embedding, one shared transformer block,
//! the latent-memory / prediction-token recursion, and the two linear heads.

mod config;
mod params;

use std::cell::Cell;

use rand::{Rng, SeedableRng};

pub use config::ModelConfig;
pub use params::{count_params, param_specs, Init, LayerParams, ModelParams, ParamReport, ParamSpec};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Recurrent state carried across recursion and supervision steps:
/// `y: [B, 1, d]`, `z: [B, K, d]`.
#[derive(Debug, Clone)]
pub struct RecurrentState<T: Scalar> {
    pub y: Tensor<T>,
    pub z: Tensor<T>,
}

impl<T: Scalar> RecurrentState<T> {
    /// Both states severed from every tape.
    pub fn detach(&self) -> Self {
        RecurrentState {
            y: self.y.detach(),
            z: self.z.detach(),
        }
    }

    pub fn batch(&self) -> usize {
        self.y.shape()[0]
    }
}

/// Output of the classification and halting heads.
#[derive(Debug, Clone)]
pub struct HeadOutput<T: Scalar> {
    /// `[B, C]`
    pub logits: Tensor<T>,
    /// `[B, 1]`
    pub halt_logit: Tensor<T>,
    /// `sigmoid(halt_logit)` per example.
    pub q: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    block_calls: Cell<usize>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config,
            params,
            block_calls: Cell::new(0),
        })
    }

    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng)?;
        Self::new(config, params)
    }

    /// Fresh weights drawn from a ChaCha stream seeded with `seed`.
    pub fn from_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    /// Number of `shared_block` invocations since construction.
    pub fn block_calls(&self) -> usize {
        self.block_calls.get()
    }

    /// Exact count over the arrays this model actually holds.
    pub fn count_params(&self) -> ParamReport {
        let items: Vec<(String, usize)> = param_specs(&self.config)
            .into_iter()
            .zip(self.params.tensors())
            .map(|(s, t)| (s.name, t.numel()))
            .collect();
        let total = items.iter().map(|(_, n)| n).sum();
        ParamReport { items, total }
    }

    /// Rearranges `B` images (`C×H×W`, row-major) into `[B, L_x, C·P·P]`
    /// patch rows. Patches are row-major over the grid; values inside a
    /// patch are channel-major, then row, then column.
    pub fn patchify(&self, images: &[f32], batch: usize) -> Result<Vec<T>> {
        let c = &self.config;
        if images.len() != batch * c.image_len() {
            return Err(Error::config(
                "image_h/image_w/channels",
                format!(
                    "expected {batch} images of {}x{}x{} ({} values), got {} values",
                    c.channels,
                    c.image_h,
                    c.image_w,
                    batch * c.image_len(),
                    images.len()
                ),
            ));
        }
        let (p, h, w) = (c.patch, c.image_h, c.image_w);
        let grid_w = w / p;
        let mut out = Vec::with_capacity(batch * c.num_patches() * c.patch_dim());
        for b in 0..batch {
            let img = &images[b * c.image_len()..(b + 1) * c.image_len()];
            for patch in 0..c.num_patches() {
                let (py, px) = (patch / grid_w, patch % grid_w);
                for ch in 0..c.channels {
                    for dy in 0..p {
                        let row = ch * h * w + (py * p + dy) * w + px * p;
                        out.extend(img[row..row + p].iter().map(|&v| T::lit(v as f64)));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Image tokens `x = patches·W_Eᵀ + b_E + pos`, shape `[B, L_x, d]`.
    pub fn patch_embed(&self, tape: &Tape<T>, images: &[f32], batch: usize) -> Result<Tensor<T>> {
        let c = &self.config;
        let patches = Tensor::new(&[batch, c.num_patches(), c.patch_dim()], self.patchify(images, batch)?)?;
        let proj = tape.linear(&patches, &self.params.patch_w, &self.params.patch_b)?;
        tape.add(&proj, &self.params.pos_embed)
    }

    /// `k` pre-norm layers: `t ← t + MHSA(LN(t)); t ← t + FFN(LN(t))`.
    pub fn shared_block(&self, tape: &Tape<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        self.block_calls.set(self.block_calls.get() + 1);
        let eps = T::lit(self.config.ln_eps);
        let mut t = tokens.clone();
        for l in &self.params.layers {
            let h = tape.layer_norm(&t, &l.ln1_gamma, &l.ln1_beta, eps)?;
            let q = tape.linear(&h, &l.wq, &l.bq)?;
            let k = tape.linear(&h, &l.wk, &l.bk)?;
            let v = tape.linear(&h, &l.wv, &l.bv)?;
            let a = tape.attention(&q, &k, &v, self.config.heads)?;
            t = tape.add(&t, &tape.linear(&a, &l.wo, &l.bo)?)?;
            let h = tape.layer_norm(&t, &l.ln2_gamma, &l.ln2_beta, eps)?;
            let hidden = tape.gelu(&tape.linear(&h, &l.w1, &l.b1)?);
            t = tape.add(&t, &tape.linear(&hidden, &l.w2, &l.b2)?)?;
        }
        Ok(t)
    }

    /// `M` inner iterations of `z ← block([x, y, z])[last K]` with `x`, `y` fixed.
    pub fn refine_memory(&self, tape: &Tape<T>, x: &Tensor<T>, state: &RecurrentState<T>, steps: usize) -> Result<Tensor<T>> {
        if steps == 0 {
            return Err(Error::config("latent_steps", "must be >= 1"));
        }
        let lx = x.shape()[x.rank() - 2];
        let k = state.z.shape()[state.z.rank() - 2];
        let mut z = state.z.clone();
        for _ in 0..steps {
            let seq = tape.concat_tokens(&[x, &state.y, &z])?;
            let out = self.shared_block(tape, &seq)?;
            z = tape.slice_tokens(&out, lx + 1, k)?;
        }
        Ok(z)
    }

    /// `y ← block([y, z])[first]`; the image tokens are not an input.
    pub fn update_prediction(&self, tape: &Tape<T>, y: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let seq = tape.concat_tokens(&[y, z])?;
        let out = self.shared_block(tape, &seq)?;
        tape.slice_tokens(&out, 0, 1)
    }

    /// `T` recursion steps of {refine memory `M` times; update prediction}.
    pub fn recurse(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        state: &RecurrentState<T>,
        recursions: usize,
        latent_steps: usize,
    ) -> Result<RecurrentState<T>> {
        if recursions == 0 {
            return Err(Error::config("recursions", "must be >= 1"));
        }
        let mut state = state.clone();
        for _ in 0..recursions {
            let z = self.refine_memory(tape, x, &state, latent_steps)?;
            let y = self.update_prediction(tape, &state.y, &z)?;
            state = RecurrentState { y, z };
        }
        Ok(state)
    }

    /// Classification logits, halting logit and `q = σ(halt_logit)` read from `y`.
    pub fn heads(&self, tape: &Tape<T>, y: &Tensor<T>) -> Result<HeadOutput<T>> {
        let d = self.config.embed_dim;
        let batch = y.numel() / d;
        let logits = tape.linear(y, &self.params.cls_w, &self.params.cls_b)?;
        let logits = tape.reshape(&logits, &[batch, self.config.num_classes])?;
        let halt = tape.linear(y, &self.params.halt_w, &self.params.halt_b)?;
        let halt_logit = tape.reshape(&halt, &[batch, 1])?;
        let q = halt_logit.data().iter().map(|&p| crate::tensor::sigmoid(p)).collect();
        Ok(HeadOutput { logits, halt_logit, q })
    }

    /// Learned initial states replicated over the batch; the replicas are
    /// recorded on `tape` so their gradients sum into `y_init`/`z_init`.
    pub fn init_state(&self, tape: &Tape<T>, batch: usize) -> Result<RecurrentState<T>> {
        Ok(RecurrentState {
            y: tape.replicate(&self.params.y_init, batch)?,
            z: tape.replicate(&self.params.z_init, batch)?,
        })
    }

    /// Full pass for a batch: embed, recurse from `state` (or the learned
    /// initial state), and read the heads.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        images: &[f32],
        batch: usize,
        state: Option<&RecurrentState<T>>,
        recursions: usize,
        latent_steps: usize,
    ) -> Result<(HeadOutput<T>, RecurrentState<T>)> {
        let x = self.patch_embed(tape, images, batch)?;
        let start = match state {
            Some(s) => s.clone(),
            None => self.init_state(tape, batch)?,
        };
        let out = self.recurse(tape, &x, &start, recursions, latent_steps)?;
        let heads = self.heads(tape, &out.y)?;
        Ok((heads, out))
    }

    /// Untracked copy of this model with the given weights (e.g. the EMA
    /// shadow), for evaluation.
    pub fn with_weights(&self, values: &[Vec<T>]) -> Result<Model<T>> {
        let params = ModelParams::from_flat(&self.config, values, false)?;
        Model::new(self.config.clone(), params)
    }
}
