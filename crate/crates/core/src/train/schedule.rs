use std::f64::consts::PI;

/// Linear warmup from 0 to `lr_max` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, lr_max: f64) -> f64 {
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return lr_max;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    (0.5 * lr_max * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Warmup length for a run of `total_steps` optimizer-schedule steps.
pub fn warmup_steps(total_steps: u64, fraction: f64) -> u64 {
    (total_steps as f64 * fraction).round() as u64
}
