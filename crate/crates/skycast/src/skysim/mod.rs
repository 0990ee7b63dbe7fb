//! Parametric synthetic sky and PV generator.
//!
//! Stands in for the private capture rig: it renders hemispherical sky
//! frames at four exposures, produces the matching raw power signal,
//! and writes the exact on-disk formats the data pipeline ingests, plus
//! a `truth.json` with the generating state for verification.
//!
//! The model is deliberately simple but has genuine predictive signal:
//! Gaussian-blob clouds advect linearly with a per-day wind, so a
//! blob's future occlusion of the sun is readable from past frames.
//! Radiance is a clear-sky gradient plus a sun disk whose peak
//! saturates even the shortest exposure (the sensor limitation of the
//! real rig), attenuated by cloud opacity with a small diffuse glow so
//! overcast skies stay bright enough to pass the darkness filter.
//! Power is capacity·max(0, sin elevation)·(1 − β·occlusion) plus a
//! seeded noise floor, with readings under 1 W reported as 0 (below
//! sensor sensitivity).

use crate::datapipe::{
    frame_file_name, solar_position, solid_angles, write_pgm, write_power_csv, DatasetMeta,
    DayMeta, GrayImage, PipeError, PowerSeries, Result, SolarPosition, WeatherClass, EXPOSURES_MS,
    INSTANT_SPACING_S,
};
use chrono::NaiveDate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub days: usize,
    pub resolution: usize,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub capacity_w: f64,
    /// First simulated calendar day; later days are consecutive.
    pub start_date: NaiveDate,
    /// Daily capture window start, hours UTC.
    pub start_hour_utc: f64,
    pub minutes_per_day: usize,
    /// Desired cloud regime per day, cycled when shorter than `days`.
    pub regimes: Vec<WeatherClass>,
    /// Seconds between frame captures (must divide 60).
    pub frame_cadence_s: i64,
    /// Raw power sampling cadence, seconds.
    pub power_cadence_s: i64,
    /// Sensor gain per millisecond of exposure.
    pub exposure_gain: f64,
    /// Peak radiance of the sun disk; ≫ 1 saturates the 11 ms exposure.
    pub sun_peak_radiance: f64,
    pub sun_sigma_px: f64,
    /// β: fraction of power lost under full sun occlusion.
    pub occlusion_depth: f64,
    /// Standard deviation of the additive power noise, watts.
    pub noise_w: f64,
}

impl SimConfig {
    /// Desk-scale preset: 32×32 frames, a Kyoto-like site, a two-hour
    /// midday window.
    pub fn desk(seed: u64, days: usize) -> Self {
        SimConfig {
            seed,
            days,
            resolution: 32,
            latitude_deg: 35.03,
            longitude_deg: 135.78,
            capacity_w: 2500.0,
            start_date: NaiveDate::from_ymd_opt(2017, 6, 1).unwrap(),
            start_hour_utc: 2.0,
            minutes_per_day: 120,
            regimes: vec![
                WeatherClass::Partly,
                WeatherClass::Partly,
                WeatherClass::Clear,
                WeatherClass::Partly,
                WeatherClass::Overcast,
            ],
            frame_cadence_s: INSTANT_SPACING_S,
            power_cadence_s: 1,
            exposure_gain: 0.005,
            sun_peak_radiance: 50.0,
            sun_sigma_px: 1.3,
            occlusion_depth: 0.9,
            noise_w: 2.0,
        }
    }

    fn day_start_unix(&self, day_index: usize) -> i64 {
        let date = self.start_date + chrono::Duration::days(day_index as i64);
        let midnight = date.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
        midnight + (self.start_hour_utc * 3600.0).round() as i64
    }
}

/// One advecting Gaussian cloud blob.
#[derive(Debug, Clone)]
struct Blob {
    x0: f64,
    y0: f64,
    radius: f64,
    opacity: f64,
}

/// Per-day generating state.
#[derive(Debug, Clone)]
pub struct DayScene {
    blobs: Vec<Blob>,
    wind: (f64, f64),
    domain: f64,
    resolution: usize,
}

impl DayScene {
    /// Cloud opacity at image position (x, y) after `t_min` minutes,
    /// clamped to [0, 1]. Blobs live on a wrapping domain slightly
    /// larger than the image so they drift across without popping.
    pub fn opacity(&self, x: f64, y: f64, t_min: f64) -> f64 {
        let d = self.domain;
        let mut total = 0.0;
        for b in &self.blobs {
            let bx = (b.x0 + self.wind.0 * t_min).rem_euclid(d);
            let by = (b.y0 + self.wind.1 * t_min).rem_euclid(d);
            // Nearest wrapped image of the blob center.
            let mut dx = (x - bx).abs();
            if dx > d / 2.0 {
                dx = d - dx;
            }
            let mut dy = (y - by).abs();
            if dy > d / 2.0 {
                dy = d - dy;
            }
            let r2 = dx * dx + dy * dy;
            total += b.opacity * (-r2 / (2.0 * b.radius * b.radius)).exp();
        }
        total.min(1.0)
    }

    /// Fraction of in-circle pixels with opacity above 0.5.
    pub fn cloud_fraction(&self, t_min: f64) -> f64 {
        let h = self.resolution;
        let center = h as f64 / 2.0;
        let mut covered = 0usize;
        let mut total = 0usize;
        for y in 0..h {
            for x in 0..h {
                let dx = x as f64 + 0.5 - center;
                let dy = y as f64 + 0.5 - center;
                if (dx * dx + dy * dy).sqrt() > center {
                    continue;
                }
                total += 1;
                if self.opacity(x as f64 + 0.5, y as f64 + 0.5, t_min) > 0.5 {
                    covered += 1;
                }
            }
        }
        covered as f64 / total.max(1) as f64
    }
}

/// Builds the day's cloud field from its regime.
fn make_scene(config: &SimConfig, regime: WeatherClass, rng: &mut ChaCha8Rng) -> DayScene {
    let h = config.resolution as f64;
    let (count, radius_rel, opacity_range): (usize, (f64, f64), (f64, f64)) = match regime {
        WeatherClass::Clear => (1, (0.06, 0.10), (0.15, 0.30)),
        WeatherClass::Partly => (9, (0.09, 0.16), (0.75, 0.95)),
        WeatherClass::Overcast => (42, (0.16, 0.26), (0.85, 0.98)),
    };
    let margin = 0.3 * h;
    let domain = h + 2.0 * margin;
    let blobs = (0..count)
        .map(|_| Blob {
            x0: rng.gen_range(0.0..domain),
            y0: rng.gen_range(0.0..domain),
            radius: rng.gen_range(radius_rel.0 * h..radius_rel.1 * h),
            opacity: rng.gen_range(opacity_range.0..opacity_range.1),
        })
        .collect();
    // A dominant eastward drift with a seeded crosswind component.
    let wind = (
        rng.gen_range(1.8..3.2) * h / 32.0,
        rng.gen_range(-1.0..1.0) * h / 32.0,
    );
    DayScene {
        blobs,
        wind,
        domain,
        resolution: config.resolution,
    }
}

/// Sun center in image coordinates (x right/east, y down/south —
/// north is up). `None` below the horizon.
pub fn sun_pixel(sun: &SolarPosition, resolution: usize) -> Option<(f64, f64)> {
    if sun.elevation <= 0.0 {
        return None;
    }
    let half = resolution as f64 / 2.0;
    let zenith = FRAC_PI_2 - sun.elevation;
    let r = zenith / FRAC_PI_2 * half;
    Some((half + r * sun.azimuth.sin(), half - r * sun.azimuth.cos()))
}

/// Radiance field of one instant, before exposure scaling.
fn radiance_map(
    config: &SimConfig,
    scene: &DayScene,
    sun: &SolarPosition,
    t_min: f64,
) -> Vec<f64> {
    let h = config.resolution;
    let half = h as f64 / 2.0;
    let sun_px = sun_pixel(sun, h);
    let daylight = sun.elevation.sin().max(0.0);
    let sky_base = 0.35 * daylight.sqrt();
    let mut out = vec![0.0f64; h * h];
    for y in 0..h {
        for x in 0..h {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dx = px - half;
            let dy = py - half;
            let r = (dx * dx + dy * dy).sqrt();
            if r > half {
                continue; // outside the fisheye circle
            }
            // Clear-sky gradient, brighter toward the zenith.
            let mut radiance = sky_base * (1.0 - 0.4 * (r / half));
            if let Some((sx, sy)) = sun_px {
                let d2 = (px - sx) * (px - sx) + (py - sy) * (py - sy);
                radiance += config.sun_peak_radiance
                    * daylight
                    * (-d2 / (2.0 * config.sun_sigma_px * config.sun_sigma_px)).exp();
            }
            let op = scene.opacity(px, py, t_min);
            // Attenuate by the cloud, with a diffuse glow so overcast
            // skies remain bright enough to register on the sensor.
            out[y * h + x] = radiance * (1.0 - op) + 0.6 * sky_base * op;
        }
    }
    out
}

fn quantize(radiance: &[f64], exposure_ms: u32, gain: f64, size: usize) -> GrayImage {
    let pixels = radiance
        .iter()
        .map(|&r| {
            let v = (r * exposure_ms as f64 * gain).clamp(0.0, 1.0);
            ((v * 255.0).round() / 255.0) as f32
        })
        .collect();
    GrayImage::new(size, pixels)
}

/// Gaussian-weighted mean cloud opacity over the sun disk, in [0, 1].
fn sun_occlusion(config: &SimConfig, scene: &DayScene, sun_px: (f64, f64), t_min: f64) -> f64 {
    let sigma = config.sun_sigma_px;
    let reach = (3.0 * sigma).ceil() as i64;
    let mut num = 0.0;
    let mut den = 0.0;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let px = sun_px.0 + dx as f64;
            let py = sun_px.1 + dy as f64;
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            num += w * scene.opacity(px, py, t_min);
            den += w;
        }
    }
    num / den
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthMinute {
    pub timestamp: i64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    pub cloud_fraction: f64,
    /// Hemispheric integral of radiance·gain — directly comparable to
    /// the pipeline's HDR-merged sky intensity.
    pub sky_intensity: f64,
    /// Minute-averaged true power, watts.
    pub power_w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DayTruth {
    pub date: String,
    pub regime: WeatherClass,
    pub auto_label: WeatherClass,
    pub mean_cloud_fraction: f64,
    pub wind_px_per_min: (f64, f64),
    pub minutes: Vec<TruthMinute>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    pub schema_version: u32,
    pub days: Vec<DayTruth>,
}

/// One frame ready for disk.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: i64,
    pub exposure_ms: u32,
    pub image: GrayImage,
}

#[derive(Debug)]
pub struct DayRender {
    pub date: NaiveDate,
    pub scene: DayScene,
    pub frames: Vec<Frame>,
    pub raw_power: PowerSeries,
    pub truth: DayTruth,
}

/// Renders one full day: frames on the capture cadence (starting one
/// minute early so the first minute has a complete stack), raw power on
/// the power cadence, and per-minute truth.
pub fn render_day(config: &SimConfig, day_index: usize) -> DayRender {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ day_index as u64);
    let regime = config.regimes[day_index % config.regimes.len()];
    let scene = make_scene(config, regime, &mut rng);
    let date = config.start_date + chrono::Duration::days(day_index as i64);
    let start = config.day_start_unix(day_index);
    let end = start + config.minutes_per_day as i64 * 60;

    let sun_at = |t: i64| solar_position(t, config.latitude_deg, config.longitude_deg);
    let minutes_since = |t: i64| (t - start) as f64 / 60.0;

    // Frames from one minute before the window so minute `start` has
    // its five instants.
    let mut frames = Vec::new();
    let mut t = start - 60;
    while t <= end {
        let sun = sun_at(t);
        let radiance = radiance_map(config, &scene, &sun, minutes_since(t));
        for &exp in &EXPOSURES_MS {
            frames.push(Frame {
                timestamp: t,
                exposure_ms: exp,
                image: quantize(&radiance, exp, config.exposure_gain, config.resolution),
            });
        }
        t += config.frame_cadence_s;
    }

    // Raw power with the seeded noise stream.
    let mut entries = Vec::new();
    let mut t = start - 60;
    while t <= end {
        let sun = sun_at(t);
        let noise: f64 = rng.gen_range(-1.0..1.0) * config.noise_w;
        let base = match sun_pixel(&sun, config.resolution) {
            None => 0.0,
            Some(px) => {
                let occ = sun_occlusion(config, &scene, px, minutes_since(t));
                config.capacity_w
                    * sun.elevation.sin().max(0.0)
                    * (1.0 - config.occlusion_depth * occ)
            }
        };
        let power = if base < 1.0 {
            0.0 // below sensor sensitivity
        } else {
            (base + noise).clamp(0.0, config.capacity_w)
        };
        entries.push((t, power));
        t += config.power_cadence_s;
    }
    let raw_power = PowerSeries::new(entries).expect("simulated cadence is monotonic");

    // Per-minute truth.
    let angles = solid_angles(config.resolution.max(16));
    let mut minutes = Vec::new();
    let mut fraction_sum = 0.0;
    let mut minute = start;
    while minute <= end {
        let sun = sun_at(minute);
        let tm = minutes_since(minute);
        let radiance = radiance_map(config, &scene, &sun, tm);
        let sky = if config.resolution >= 16 {
            let scaled: Vec<f64> = radiance.iter().map(|r| r * config.exposure_gain).collect();
            crate::datapipe::sky_intensity(&scaled, &angles).expect("matching geometry")
        } else {
            0.0
        };
        let fraction = scene.cloud_fraction(tm);
        fraction_sum += fraction;
        // Minute-averaged power over [minute−60, minute].
        let window: Vec<f64> = raw_power
            .entries()
            .iter()
            .filter(|&&(ts, _)| ts >= minute - 60 && ts <= minute)
            .map(|&(_, p)| p)
            .collect();
        let power = window.iter().sum::<f64>() / window.len().max(1) as f64;
        minutes.push(TruthMinute {
            timestamp: minute,
            azimuth_rad: sun.azimuth,
            elevation_rad: sun.elevation,
            cloud_fraction: fraction,
            sky_intensity: sky,
            power_w: power,
        });
        minute += 60;
    }
    let mean_cloud_fraction = fraction_sum / minutes.len().max(1) as f64;

    DayRender {
        date,
        truth: DayTruth {
            date: date.format("%Y-%m-%d").to_string(),
            regime,
            auto_label: WeatherClass::from_cloud_fraction(mean_cloud_fraction),
            mean_cloud_fraction,
            wind_px_per_min: scene.wind,
            minutes,
        },
        scene,
        frames,
        raw_power,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmitSummary {
    pub days: usize,
    pub frames_written: usize,
    pub power_rows: usize,
    pub labels: Vec<WeatherClass>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| PipeError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| PipeError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Renders every day and writes the dataset directory: `metadata.json`
/// (weather labels derived from the realized cloud fractions),
/// `power.csv`, `frames/*.pgm`, and `truth.json`.
pub fn emit_dataset(config: &SimConfig, out_dir: &Path) -> Result<EmitSummary> {
    let frames_dir = out_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| PipeError::Io {
        path: frames_dir.display().to_string(),
        source: e,
    })?;

    let mut all_power: Vec<(i64, f64)> = Vec::new();
    let mut day_metas = Vec::new();
    let mut truth_days = Vec::new();
    let mut frames_written = 0usize;
    let mut labels = Vec::new();

    for day in 0..config.days {
        let rendered = render_day(config, day);
        for frame in &rendered.frames {
            let name = frame_file_name(frame.timestamp, frame.exposure_ms);
            write_file(&frames_dir.join(name), &write_pgm(&frame.image))?;
            frames_written += 1;
        }
        all_power.extend_from_slice(rendered.raw_power.entries());
        day_metas.push(DayMeta {
            date: rendered.truth.date.clone(),
            weather: rendered.truth.auto_label,
        });
        labels.push(rendered.truth.auto_label);
        truth_days.push(rendered.truth);
    }

    let power = PowerSeries::new(all_power).expect("days are disjoint and ordered");
    write_file(&out_dir.join("power.csv"), write_power_csv(&power).as_bytes())?;

    let meta = DatasetMeta {
        schema_version: 1,
        latitude_deg: config.latitude_deg,
        longitude_deg: config.longitude_deg,
        panel_capacity_w: config.capacity_w,
        resolution: config.resolution,
        days: day_metas,
    };
    write_file(
        &out_dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)
            .expect("metadata serializes")
            .as_bytes(),
    )?;

    let truth = SimTruth {
        schema_version: 1,
        days: truth_days,
    };
    write_file(
        &out_dir.join("truth.json"),
        serde_json::to_string_pretty(&truth)
            .expect("truth serializes")
            .as_bytes(),
    )?;

    Ok(EmitSummary {
        days: config.days,
        frames_written,
        power_rows: power.len(),
        labels,
    })
}
