use serde::{Deserialize, Serialize};

use super::cifar::{ImageRecord, CHANNELS, IMAGE_SIDE};
use crate::error::{Error, Result};

const PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Per-channel mean and standard deviation of unit-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Population statistics over every pixel of `records`, accumulated in
    /// 64-bit from the raw bytes.
    pub fn compute(records: &[ImageRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("channel statistics of an empty set".into()));
        }
        let mut sum = [0u64; 3];
        let mut sq = [0u64; 3];
        for r in records {
            for c in 0..CHANNELS {
                for &b in &r.pixels[c * PLANE..(c + 1) * PLANE] {
                    sum[c] += b as u64;
                    sq[c] += (b as u64) * (b as u64);
                }
            }
        }
        let n = (records.len() * PLANE) as f64;
        let mut stats = ChannelStats::identity();
        for c in 0..CHANNELS {
            let mean = sum[c] as f64 / n;
            let var = sq[c] as f64 / n - mean * mean;
            stats.mean[c] = mean / 255.0;
            stats.std[c] = var.max(0.0).sqrt() / 255.0;
        }
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!("channel std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }
}

/// In place `(x − mean_c) / std_c` over a `C×H×W` image.
pub fn normalize(image: &mut [f32], stats: &ChannelStats) {
    let plane = image.len() / CHANNELS;
    for (c, chunk) in image.chunks_exact_mut(plane).enumerate() {
        let (m, s) = (stats.mean[c] as f32, stats.std[c] as f32);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}
