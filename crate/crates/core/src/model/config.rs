use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and recursion schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    /// Patch side `P`.
    pub patch: usize,
    /// Token width `d`.
    pub embed_dim: usize,
    /// Latent memory size `K`.
    pub latent_tokens: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Layers in the one shared block (`k`).
    pub block_depth: usize,
    pub num_classes: usize,
    /// Recursion steps `T` per supervision step.
    pub recursions: usize,
    /// Inner memory refinements `M` per recursion step.
    pub latent_steps: usize,
    /// Maximum supervision steps `N` per batch.
    pub supervision_steps: usize,
    /// Batch-mean halting probability above which training stops unrolling.
    pub halt_threshold: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::cifar10()
    }
}

impl ModelConfig {
    /// 3.56M parameters with 10 classes.
    pub fn cifar10() -> Self {
        ModelConfig {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch: 4,
            embed_dim: 312,
            latent_tokens: 16,
            heads: 8,
            ffn_hidden: 4 * 312,
            block_depth: 3,
            num_classes: 10,
            recursions: 1,
            latent_steps: 3,
            supervision_steps: 1,
            halt_threshold: 0.5,
            ln_eps: 1e-5,
        }
    }

    pub fn cifar100() -> Self {
        ModelConfig {
            num_classes: 100,
            ..Self::cifar10()
        }
    }

    /// An 8×8 image, four 4×4 patches, `d = 8`, `K = 2`, one layer. Small
    /// enough for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            channels: 3,
            patch: 4,
            embed_dim: 8,
            latent_tokens: 2,
            heads: 2,
            ffn_hidden: 32,
            block_depth: 1,
            num_classes: 10,
            recursions: 1,
            latent_steps: 2,
            supervision_steps: 1,
            halt_threshold: 0.5,
            ln_eps: 1e-5,
        }
    }

    /// Number of image tokens `L_x`.
    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_h * self.image_w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("latent_tokens", self.latent_tokens),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("block_depth", self.block_depth),
            ("num_classes", self.num_classes),
            ("recursions", self.recursions),
            ("latent_steps", self.latent_steps),
            ("supervision_steps", self.supervision_steps),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !self.image_h.is_multiple_of(self.patch) {
            return Err(Error::config("image_h", format!("not divisible by patch {}", self.patch)));
        }
        if !self.image_w.is_multiple_of(self.patch) {
            return Err(Error::config("image_w", format!("not divisible by patch {}", self.patch)));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config("heads", format!("does not divide embed_dim {}", self.embed_dim)));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim", "layer norm needs width >= 2"));
        }
        if !(self.halt_threshold > 0.0 && self.halt_threshold < 1.0) {
            return Err(Error::config("halt_threshold", "must lie in (0, 1)"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::cifar10().validate().unwrap();
        ModelConfig::cifar100().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        assert_eq!(ModelConfig::cifar10().num_patches(), 64);
        assert_eq!(ModelConfig::micro().num_patches(), 4);
    }

    #[test]
    fn invalid_fields_are_named() {
        let cfg = ModelConfig {
            heads: 7,
            ..ModelConfig::cifar10()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("{other:?}"),
        }
        let cfg = ModelConfig {
            halt_threshold: 1.0,
            ..ModelConfig::cifar10()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "halt_threshold"));
        let cfg = ModelConfig {
            image_w: 30,
            ..ModelConfig::cifar10()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "image_w"));
    }
}
