"""Recursive vision transformer for CIFAR, implemented in Rust."""

from vitrm._vitrm import (
    Checkpoint,
    Model,
    ModelConfig,
    Trainer,
    cosine_lr,
    count_params,
)

__all__ = ["Checkpoint", "Model", "ModelConfig", "Trainer", "cosine_lr", "count_params"]
