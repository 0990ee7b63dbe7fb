//! Multi-exposure HDR merge.
//!
//! Assumes a linear camera response. Per pixel, each exposure e votes
//! for radiance v_e / t_e with hat weight w(v) = 1 − |2v − 1|; saturated
//! (v > 0.99) and near-black (v < 0.01) pixels are excluded. When every
//! exposure is excluded the shortest exposure's estimate is used, since
//! it is the only one that can still be unsaturated at high radiance.

use super::{GrayImage, PipeError, Result};

const SATURATED: f64 = 0.99;
const NEAR_BLACK: f64 = 0.01;

fn hat_weight(v: f64) -> f64 {
    if v > SATURATED || v < NEAR_BLACK {
        0.0
    } else {
        1.0 - (2.0 * v - 1.0).abs()
    }
}

/// Merges one instant's exposures (ordered shortest first, matching
/// `exposure_ms`) into a per-pixel radiance image.
pub fn hdr_merge(frames: &[&GrayImage], exposures_ms: &[u32]) -> Result<Vec<f64>> {
    if frames.len() != exposures_ms.len() || frames.is_empty() {
        return Err(PipeError::ExposureCount {
            expected: exposures_ms.len(),
            got: frames.len(),
        });
    }
    let size = frames[0].size;
    for f in frames {
        if f.size != size {
            return Err(PipeError::Pgm(format!(
                "exposure frames disagree on size: {} vs {}",
                f.size, size
            )));
        }
    }
    let n = size * size;
    let mut out = vec![0.0f64; n];
    for (i, r) in out.iter_mut().enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        for (frame, &t) in frames.iter().zip(exposures_ms) {
            let v = frame.pixels[i] as f64;
            let w = hat_weight(v);
            num += w * (v / t as f64);
            den += w;
        }
        *r = if den > 0.0 {
            num / den
        } else {
            frames[0].pixels[i] as f64 / exposures_ms[0] as f64
        };
    }
    Ok(out)
}
