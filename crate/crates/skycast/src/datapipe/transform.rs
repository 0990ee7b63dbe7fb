//! Log-space transform of power values and the α normalization.
//!
//! g(x) = x for x < 1 and log(x) for x ≥ 1. Preprocessing clamps powers
//! to at least 1 W first (zero-power rows are already filtered out and
//! sub-watt readings are below meaningful panel output), so on the live
//! domain the transform is invertible with g⁻¹(y) = exp(y).

use super::{PipeError, Result};

/// Eq.-style piecewise log transform. Negative input is rejected.
pub fn log_transform(x_watts: f64) -> Result<f64> {
    if x_watts < 0.0 || !x_watts.is_finite() {
        return Err(PipeError::NegativePower(x_watts));
    }
    Ok(if x_watts < 1.0 { x_watts } else { x_watts.ln() })
}

/// Inverse of the transform on the effective domain (y ≥ 0 ↔ x ≥ 1 W).
pub fn inverse_log_transform(y: f64) -> f64 {
    y.exp()
}

/// Clamp applied before the transform.
pub fn clamp_watts(x: f64) -> f64 {
    x.max(1.0)
}

/// α from the training split only: 1 / g(max training power).
pub fn fit_alpha<I: IntoIterator<Item = f64>>(train_powers: I) -> Result<f64> {
    let mut max_power = f64::NEG_INFINITY;
    let mut any = false;
    for p in train_powers {
        any = true;
        if p > max_power {
            max_power = p;
        }
    }
    if !any {
        return Err(PipeError::EmptyTrainingSeries);
    }
    let g = log_transform(clamp_watts(max_power))?;
    if g <= 0.0 {
        return Err(PipeError::AlphaDomain);
    }
    Ok(1.0 / g)
}

/// q = α·y clipped into [0, 1].
pub fn normalize(y: f64, alpha: f64) -> f64 {
    (alpha * y).clamp(0.0, 1.0)
}

/// Watts → normalized log power.
pub fn q_from_watts(watts: f64, alpha: f64) -> f64 {
    let y = log_transform(clamp_watts(watts)).expect("clamped input is non-negative");
    normalize(y, alpha)
}

/// Normalized log power → watts.
pub fn watts_from_q(q: f64, alpha: f64) -> f64 {
    inverse_log_transform(q / alpha)
}
