//! Small helpers shared by the time-series types.

use crate::{Error, Result};

/// Number of `dt` steps in `horizon`, requiring an integer multiple.
pub fn steps_for(horizon_s: f64, dt_s: f64) -> Result<usize> {
    if !(dt_s > 0.0) || !dt_s.is_finite() {
        return Err(Error::InvalidParams(format!("time step must be positive, got {dt_s}")));
    }
    if !(horizon_s >= 0.0) || !horizon_s.is_finite() {
        return Err(Error::InvalidParams(format!("horizon must be non-negative, got {horizon_s}")));
    }
    let n = (horizon_s / dt_s).round();
    if (n * dt_s - horizon_s).abs() > 1e-9 * horizon_s.max(1.0) {
        return Err(Error::InvalidParams(format!(
            "horizon {horizon_s} s is not a multiple of dt {dt_s} s"
        )));
    }
    Ok(n as usize)
}

/// Fails unless two sampled series share a step and a length.
pub fn check_same_grid(dt_a: f64, len_a: usize, dt_b: f64, len_b: usize) -> Result<()> {
    if (dt_a - dt_b).abs() > 1e-12 * dt_a.abs().max(1.0) || len_a != len_b {
        return Err(Error::GridMismatch {
            expected: format!("{len_a} samples at {dt_a} s"),
            found: format!("{len_b} samples at {dt_b} s"),
        });
    }
    Ok(())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
