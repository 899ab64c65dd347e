use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak`, then half-cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> Result<f64> {
    if warmup_steps >= total_steps || step > total_steps {
        return Err(Error::Config(format!(
            "lr_at: need step <= total_steps and warmup_steps < total_steps (step {step}, warmup {warmup_steps}, total {total_steps})"
        )));
    }
    if !(peak >= 0.0) {
        return Err(Error::Config(format!("lr_at: peak {peak} must be non-negative")));
    }
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}
