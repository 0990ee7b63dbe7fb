//! Multi-horizon windowing of day records into supervised samples.
//!
//! For a horizon of x minutes the day is resampled onto an x-minute
//! grid (each grid point averaging the x underlying minute records,
//! which matches averaging the raw data over [t−x, t] at 1 s cadence).
//! A sample takes the K = 6 grid points t₀−5x … t₀ as history — exactly
//! the stated 5x-minute span — and the point at t₀+x as target. Windows
//! that straddle a filtered-out minute are skipped.

use super::transform::q_from_watts;
use super::{DayRecords, Dataset, WeatherClass};
use std::f64::consts::PI;

/// Number of history points (including t₀).
pub const HISTORY_POINTS: usize = 6;

/// One supervised example. Image stacks are referenced by day/minute
/// index to avoid duplicating pixel data across overlapping windows.
#[derive(Debug, Clone)]
pub struct Sample {
    pub day_index: usize,
    pub weather: WeatherClass,
    pub horizon_minutes: u32,
    /// Timestamp of the last history point t₀.
    pub t0: i64,
    /// Minute-record indices of the history points, oldest first.
    pub step_minute_idx: Vec<usize>,
    /// Normalized log power q at each history point.
    pub step_q: Vec<f64>,
    /// Normalized sun position (azimuth/2π, elevation/π) per step.
    pub step_theta: Vec<[f64; 2]>,
    /// Grid-averaged watts at t₀ (the persistence prediction).
    pub watts_t0: f64,
    /// Grid-averaged watts at t₀+x (the ground truth).
    pub watts_target: f64,
    /// Δq = q(t₀+x) − q(t₀).
    pub delta_q: f64,
    /// Sun-position change between t₀+x and t₀, normalized like
    /// `step_theta`; the azimuth difference is wrapped to (−π, π].
    pub delta_theta: [f64; 2],
    /// Sky-intensity change between t₀+x and t₀.
    pub delta_s: f64,
}

/// Wraps an angle difference to (−π, π].
pub fn wrap_angle(delta: f64) -> f64 {
    let mut d = (delta + PI).rem_euclid(2.0 * PI) - PI;
    if d == -PI {
        d = PI;
    }
    d
}

fn normalized_theta(sun: &super::SolarPosition) -> [f64; 2] {
    [sun.azimuth / (2.0 * PI), sun.elevation / PI]
}

struct GridPoint {
    timestamp: i64,
    watts: f64,
    minute_idx: usize,
    theta: [f64; 2],
    azimuth: f64,
    elevation: f64,
    sky: f64,
}

/// Resamples one day onto the x-minute grid. A grid point at t needs
/// all x minute records (t−(x−1)·60 … t) present and consecutive; the
/// image stack, sun position and sky intensity are taken from the
/// record at t itself (the nearest instant).
fn day_grid(day: &DayRecords, horizon_minutes: u32) -> Vec<GridPoint> {
    let x = horizon_minutes as i64;
    let step = 60 * x;
    let mut by_ts = std::collections::HashMap::new();
    for (i, rec) in day.minutes.iter().enumerate() {
        by_ts.insert(rec.timestamp, i);
    }
    let mut grid = Vec::new();
    for (i, rec) in day.minutes.iter().enumerate() {
        if rec.timestamp % step != 0 {
            continue;
        }
        let mut sum = 0.0;
        let mut ok = true;
        for back in 0..x {
            match by_ts.get(&(rec.timestamp - back * 60)) {
                Some(&j) => sum += day.minutes[j].power_w,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        grid.push(GridPoint {
            timestamp: rec.timestamp,
            watts: sum / x as f64,
            minute_idx: i,
            theta: normalized_theta(&rec.sun),
            azimuth: rec.sun.azimuth,
            elevation: rec.sun.elevation,
            sky: rec.sky_intensity,
        });
    }
    grid
}

/// Builds every admissible sample of one day at the given horizon.
/// Returns an empty vector (with no error) when the day is too short.
pub fn make_samples(
    dataset: &Dataset,
    day_index: usize,
    horizon_minutes: u32,
    alpha: f64,
) -> Vec<Sample> {
    let day = &dataset.days[day_index];
    let grid = day_grid(day, horizon_minutes);
    let step = 60 * horizon_minutes as i64;
    let k = HISTORY_POINTS;
    let mut out = Vec::new();
    if grid.len() < k + 1 {
        return out;
    }
    for t0_idx in (k - 1)..(grid.len() - 1) {
        let target = &grid[t0_idx + 1];
        let t0 = &grid[t0_idx];
        if target.timestamp - t0.timestamp != step {
            continue;
        }
        let window = &grid[t0_idx + 1 - k..=t0_idx];
        let contiguous = window
            .windows(2)
            .all(|w| w[1].timestamp - w[0].timestamp == step);
        if !contiguous {
            continue;
        }
        let q_t0 = q_from_watts(t0.watts, alpha);
        let q_target = q_from_watts(target.watts, alpha);
        out.push(Sample {
            day_index,
            weather: day.weather,
            horizon_minutes,
            t0: t0.timestamp,
            step_minute_idx: window.iter().map(|p| p.minute_idx).collect(),
            step_q: window.iter().map(|p| q_from_watts(p.watts, alpha)).collect(),
            step_theta: window.iter().map(|p| p.theta).collect(),
            watts_t0: t0.watts,
            watts_target: target.watts,
            delta_q: q_target - q_t0,
            delta_theta: [
                wrap_angle(target.azimuth - t0.azimuth) / (2.0 * PI),
                (target.elevation - t0.elevation) / PI,
            ],
            delta_s: target.sky - t0.sky,
        });
    }
    out
}
