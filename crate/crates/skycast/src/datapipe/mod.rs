//! Everything between raw capture data and training samples.
//!
//! The pipeline is: ingest the power CSV and PGM frames, average power
//! to one value per minute, stack the 4 exposures × 5 sub-minute frames
//! into a 20-channel tensor, drop invalid minutes (zero power or
//! too-dark images), merge exposures into HDR radiance, integrate sky
//! intensity over fisheye solid angles, attach solar positions, fit the
//! log-space normalization to the training split, and slide horizon
//! windows to produce supervised samples.

pub mod filter;
pub mod geometry;
pub mod hdr;
pub mod ingest;
pub mod samples;
pub mod solar;
pub mod split;
pub mod transform;

pub use filter::{filter_invalid, minute_average, FilterStats, DARKNESS_THRESHOLD};
pub use geometry::{sky_intensity, solid_angles};
pub use hdr::hdr_merge;
pub use ingest::{
    frame_file_name, load_dataset, parse_frame_file_name, parse_pgm, parse_power_csv, write_pgm,
    write_power_csv, DatasetMeta, DayMeta, LoadReport,
};
pub use samples::{make_samples, Sample};
pub use solar::{solar_position, SolarPosition};
pub use split::{split_days, DaySplit};
pub use transform::{
    clamp_watts, fit_alpha, inverse_log_transform, log_transform, normalize, q_from_watts,
    watts_from_q,
};

use serde::{Deserialize, Serialize};

/// Exposure times of the four bracketed captures, in milliseconds.
pub const EXPOSURES_MS: [u32; 4] = [11, 88, 176, 264];
/// Capture instants per minute: t−60 s … t at 15 s spacing.
pub const INSTANTS_PER_MINUTE: usize = 5;
pub const INSTANT_SPACING_S: i64 = 15;
/// Channels of one stacked image input.
pub const STACK_CHANNELS: usize = EXPOSURES_MS.len() * INSTANTS_PER_MINUTE;

#[derive(Debug, thiserror::Error)]
pub enum PipeError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("power csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("pgm: {0}")]
    Pgm(String),
    #[error("metadata: {0}")]
    Meta(String),
    #[error("negative power {0} W is not a valid panel reading")]
    NegativePower(f64),
    #[error("power series timestamps must be strictly increasing (at index {0})")]
    NonMonotonic(usize),
    #[error("empty training series; cannot fit the normalization factor")]
    EmptyTrainingSeries,
    #[error("training powers never exceed 1 W; log-space normalization is undefined")]
    AlphaDomain,
    #[error("need at least {need} days, dataset has {have}")]
    TooFewDays { need: usize, have: usize },
    #[error("sky intensity: radiance has {radiance} pixels, solid-angle map has {angles}")]
    GeometryMismatch { radiance: usize, angles: usize },
    #[error("hdr merge expects {expected} exposures, got {got}")]
    ExposureCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, PipeError>;

/// Manual weather classes: clear is under ~10% average cloud, overcast
/// is fully covered, partly is everything between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherClass {
    Clear,
    Partly,
    Overcast,
}

impl WeatherClass {
    pub fn as_str(self) -> &'static str {
        match self {
            WeatherClass::Clear => "clear",
            WeatherClass::Partly => "partly",
            WeatherClass::Overcast => "overcast",
        }
    }

    /// Label from a day's mean cloud fraction using the 10%/90% bounds.
    pub fn from_cloud_fraction(fraction: f64) -> Self {
        if fraction < 0.10 {
            WeatherClass::Clear
        } else if fraction <= 0.90 {
            WeatherClass::Partly
        } else {
            WeatherClass::Overcast
        }
    }
}

/// Square grayscale image with pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(size: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), size * size, "gray image size mismatch");
        GrayImage { size, pixels }
    }

    pub fn zeros(size: usize) -> Self {
        GrayImage {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Timestamped photovoltaic power samples in watts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PowerSeries {
    entries: Vec<(i64, f64)>,
}

impl PowerSeries {
    pub fn new(entries: Vec<(i64, f64)>) -> Result<Self> {
        for (i, window) in entries.windows(2).enumerate() {
            if window[1].0 <= window[0].0 {
                return Err(PipeError::NonMonotonic(i + 1));
            }
        }
        for &(_, p) in &entries {
            if p < 0.0 || !p.is_finite() {
                return Err(PipeError::NegativePower(p));
            }
        }
        Ok(PowerSeries { entries })
    }

    pub fn entries(&self) -> &[(i64, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One minute's image input: 4 exposures × 5 capture instants stacked
/// as 20 channels, ordered instant-major then exposure-minor with
/// instants at t−60 s … t.
#[derive(Debug, Clone)]
pub struct ExposureStack {
    /// Reference time t (the newest instant), unix seconds.
    pub minute: i64,
    /// `INSTANTS_PER_MINUTE × EXPOSURES_MS.len()` frames, instant-major.
    pub channels: Vec<GrayImage>,
}

/// Which exposure channels feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureSelection {
    #[default]
    All,
    Shortest,
    Longest,
}

impl ExposureSelection {
    pub fn channel_count(self) -> usize {
        match self {
            ExposureSelection::All => STACK_CHANNELS,
            _ => INSTANTS_PER_MINUTE,
        }
    }

    fn keeps(self, exposure_idx: usize) -> bool {
        match self {
            ExposureSelection::All => true,
            ExposureSelection::Shortest => exposure_idx == 0,
            ExposureSelection::Longest => exposure_idx == EXPOSURES_MS.len() - 1,
        }
    }
}

impl ExposureStack {
    pub fn size(&self) -> usize {
        self.channels[0].size
    }

    /// The longest-exposure frame at the newest instant, used by the
    /// darkness filter.
    pub fn darkness_probe(&self) -> &GrayImage {
        let last_instant = INSTANTS_PER_MINUTE - 1;
        &self.channels[last_instant * EXPOSURES_MS.len() + EXPOSURES_MS.len() - 1]
    }

    /// The four exposures of the newest instant, shortest first.
    pub fn current_instant(&self) -> [&GrayImage; 4] {
        let base = (INSTANTS_PER_MINUTE - 1) * EXPOSURES_MS.len();
        [
            &self.channels[base],
            &self.channels[base + 1],
            &self.channels[base + 2],
            &self.channels[base + 3],
        ]
    }

    /// Flattens the selected channels into a [C, H, H] tensor.
    pub fn to_tensor<T: crate::tensor::Element>(
        &self,
        selection: ExposureSelection,
    ) -> crate::tensor::Tensor<T> {
        let h = self.size();
        let mut data = Vec::with_capacity(selection.channel_count() * h * h);
        for (idx, frame) in self.channels.iter().enumerate() {
            if selection.keeps(idx % EXPOSURES_MS.len()) {
                data.extend(frame.pixels.iter().map(|&v| T::from_f64_lossy(v as f64)));
            }
        }
        crate::tensor::Tensor::new(vec![selection.channel_count(), h, h], data)
            .expect("stack tensor geometry")
    }
}

/// One retained (valid) minute of a day.
#[derive(Debug, Clone)]
pub struct MinuteRecord {
    pub timestamp: i64,
    /// Minute-averaged power, watts.
    pub power_w: f64,
    pub stack: ExposureStack,
    pub sun: SolarPosition,
    /// Hemispheric integral of the HDR merge of the newest instant.
    pub sky_intensity: f64,
}

/// All retained minutes of one capture day.
#[derive(Debug, Clone)]
pub struct DayRecords {
    pub date: chrono::NaiveDate,
    pub weather: WeatherClass,
    pub minutes: Vec<MinuteRecord>,
}

/// A loaded, filtered dataset.
#[derive(Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub days: Vec<DayRecords>,
}

impl Dataset {
    pub fn day_count(&self) -> usize {
        self.days.len()
    }
}
