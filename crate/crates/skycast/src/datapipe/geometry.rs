//! Equiangular fisheye geometry: per-pixel solid angles and the
//! hemispheric sky-intensity integral.
//!
//! The lens model maps radial pixel distance linearly to zenith angle,
//! with the circle of radius H/2 reaching the horizon (zenith 90°). A
//! pixel at radius r (in pixels) covers dθ = c (radially) and dφ = 1/r
//! (tangentially) with c = π/H, so its solid angle is sin(cr)·c/r. The
//! in-circle total approaches 2π as H grows.

use super::{PipeError, Result};

/// Per-pixel solid-angle map for an H×H equiangular fisheye image.
/// Pixels whose center falls outside the image circle carry 0.
pub fn solid_angles(h: usize) -> Vec<f64> {
    assert!(h >= 16, "solid angle map needs H >= 16");
    let c = std::f64::consts::PI / h as f64; // zenith radians per pixel
    let center = h as f64 / 2.0;
    let radius = h as f64 / 2.0;
    let mut out = vec![0.0f64; h * h];
    for y in 0..h {
        for x in 0..h {
            let dx = x as f64 + 0.5 - center;
            let dy = y as f64 + 0.5 - center;
            let r = (dx * dx + dy * dy).sqrt();
            if r > radius {
                continue;
            }
            out[y * h + x] = (c * r).sin() * c / r;
        }
    }
    out
}

/// s = (1/2π) Σ b_i Δω_i over in-circle pixels.
pub fn sky_intensity(radiance: &[f64], angles: &[f64]) -> Result<f64> {
    if radiance.len() != angles.len() {
        return Err(PipeError::GeometryMismatch {
            radiance: radiance.len(),
            angles: angles.len(),
        });
    }
    let sum: f64 = radiance.iter().zip(angles).map(|(&b, &w)| b * w).sum();
    Ok(sum / (2.0 * std::f64::consts::PI))
}
