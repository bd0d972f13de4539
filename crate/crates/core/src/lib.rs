//! Recursive weight-shared vision transformer for CIFAR-scale classification.
//!
//! One tiny `k`-layer transformer block is applied over and over: first to
//! refine a small latent memory `z` by attending over the image tokens, the
//! prediction token `y` and `z` itself, then to update `y` from `z` alone.
//! Training applies a classification + halting loss after every unrolled
//! segment and detaches the recurrent state between segments.

pub mod error;
#[cfg(any(test, feature = "oracles"))]
pub mod gradcheck;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tape, Tensor};
