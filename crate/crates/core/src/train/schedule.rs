use serde::{Deserialize, Serialize};

/// Per-step learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    /// Linear ramp 0→1 over `round(fraction · total)` steps, then linear decay
    /// 1→0 over the rest.
    WarmupLinearDecay { warmup_fraction: f64 },
    /// Linear ramp over `warmup_steps`, then 1.
    WarmupConstant { warmup_steps: usize },
}

impl Schedule {
    pub fn warmup_steps(&self, total: usize) -> usize {
        match *self {
            Schedule::WarmupLinearDecay { warmup_fraction } => (warmup_fraction * total as f64).round() as usize,
            Schedule::WarmupConstant { warmup_steps } => warmup_steps,
        }
    }
}

/// Multiplier at `step` of `total` (`0 <= step <= total`).
pub fn lr_at(schedule: &Schedule, step: usize, total: usize) -> f64 {
    let w = schedule.warmup_steps(total);
    if step < w {
        return step as f64 / w as f64;
    }
    match schedule {
        Schedule::WarmupLinearDecay { .. } => {
            if total <= w {
                1.0
            } else {
                (total.saturating_sub(step)) as f64 / (total - w) as f64
            }
        }
        Schedule::WarmupConstant { .. } => 1.0,
    }
}
