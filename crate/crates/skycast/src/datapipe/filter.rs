//! Minute averaging and invalid-data filtering.

use super::{ExposureStack, PowerSeries};

/// Mean intensity below which the longest exposure counts as "too dark".
pub const DARKNESS_THRESHOLD: f64 = 0.02;

/// Averages raw (≤ 1 s cadence) power onto minute boundaries: one entry
/// per minute t holding the mean over [t−60 s, t]. Minutes with no raw
/// coverage are dropped.
pub fn minute_average(raw: &PowerSeries) -> PowerSeries {
    let entries = raw.entries();
    if entries.is_empty() {
        return PowerSeries::default();
    }
    let first = entries[0].0;
    let last = entries[entries.len() - 1].0;
    let mut out = Vec::new();
    let mut lo = 0usize;
    let mut minute = first.div_euclid(60) * 60;
    if minute < first {
        minute += 60;
    }
    while minute <= last + 59 {
        // Window [minute−60, minute], inclusive on both ends.
        while lo < entries.len() && entries[lo].0 < minute - 60 {
            lo += 1;
        }
        let mut hi = lo;
        let mut sum = 0.0;
        while hi < entries.len() && entries[hi].0 <= minute {
            sum += entries[hi].1;
            hi += 1;
        }
        if hi > lo {
            out.push((minute, sum / (hi - lo) as f64));
        }
        minute += 60;
    }
    PowerSeries::new(out).expect("minute grid is strictly increasing")
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FilterStats {
    pub kept: usize,
    pub zero_power: usize,
    pub too_dark: usize,
}

/// Drops minutes whose power reads 0 (below the sensor's sensitivity)
/// or whose longest-exposure frame is too dark to be a sky image.
/// An empty result is allowed; the stats report what was removed.
pub fn filter_invalid(
    pairs: Vec<(i64, f64, ExposureStack)>,
) -> (Vec<(i64, f64, ExposureStack)>, FilterStats) {
    let mut stats = FilterStats::default();
    let kept = pairs
        .into_iter()
        .filter(|(_, power, stack)| {
            if *power <= 0.0 {
                stats.zero_power += 1;
                return false;
            }
            if stack.darkness_probe().mean() < DARKNESS_THRESHOLD {
                stats.too_dark += 1;
                return false;
            }
            stats.kept += 1;
            true
        })
        .collect();
    (kept, stats)
}
