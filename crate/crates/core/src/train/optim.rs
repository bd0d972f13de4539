use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter, plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update over `params`, reading each tensor's accumulated
/// gradient (absent gradient counts as zero):
///
/// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`, with decay only where `decay[i]`.
pub fn adamw_step<T: Scalar>(
    params: &[&Tensor<T>],
    decay: &[bool],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || params.len() != decay.len() {
        return Err(Error::Validation(format!(
            "adamw: {} params, {} moment arrays, {} decay flags",
            params.len(),
            state.m.len(),
            decay.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let eps = T::lit(cfg.eps);
    let lr_t = T::lit(lr);
    for (i, p) in params.iter().enumerate() {
        let shrink = if decay[i] { T::one() - T::lit(lr * cfg.weight_decay) } else { T::one() };
        let grad = p.grad();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.update(|theta| {
            for j in 0..theta.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] = theta[j] * shrink - lr_t * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

/// AdamW bound to a model's parameter layout.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
    decay: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model_cfg: &ModelConfig, params: &ModelParams<T>, config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: OptimizerState::new(&params.tensors()),
            decay: param_specs(model_cfg).into_iter().map(|s| s.decay).collect(),
        }
    }

    pub fn with_state(model_cfg: &ModelConfig, config: AdamWConfig, state: OptimizerState<T>) -> Self {
        AdamW {
            config,
            state,
            decay: param_specs(model_cfg).into_iter().map(|s| s.decay).collect(),
        }
    }

    pub fn step(&mut self, params: &ModelParams<T>, lr: f64) -> Result<()> {
        adamw_step(&params.tensors(), &self.decay, &mut self.state, &self.config, lr)
    }
}
