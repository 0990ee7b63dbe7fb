//! On-disk dataset formats and loading.
//!
//! A dataset directory holds:
//!   - `metadata.json` — site coordinates, capacity, resolution, per-day
//!     weather labels;
//!   - `power.csv` — header `timestamp,power_w`, ISO-8601 UTC
//!     timestamps, one row per raw sample;
//!   - `frames/<YYYYMMDDTHHMMSSZ>_<exposure_ms>.pgm` — binary 8-bit PGM
//!     (P5), one file per captured frame.

use super::filter::{filter_invalid, minute_average, FilterStats};
use super::hdr::hdr_merge;
use super::solar::solar_position;
use super::{
    geometry, Dataset, DayRecords, ExposureStack, GrayImage, MinuteRecord, PipeError, PowerSeries,
    Result, WeatherClass, EXPOSURES_MS, INSTANTS_PER_MINUTE, INSTANT_SPACING_S,
};
use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Guard against hostile PGM headers.
const MAX_IMAGE_SIZE: usize = 4096;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DayMeta {
    /// Calendar date, `YYYY-MM-DD`.
    pub date: String,
    pub weather: WeatherClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub panel_capacity_w: f64,
    pub resolution: usize,
    pub days: Vec<DayMeta>,
}

fn io_err(path: &Path, source: std::io::Error) -> PipeError {
    PipeError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ── PGM ────────────────────────────────────────────────────────────

/// Parses a binary (P5) 8-bit PGM image. Comments and arbitrary header
/// whitespace are accepted; maxval must be 255 and the image square.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    fn skip_space(bytes: &[u8], pos: &mut usize) {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn read_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
        skip_space(bytes, pos);
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(PipeError::Pgm("expected a decimal header field".into()));
        }
        if *pos - start > 8 {
            return Err(PipeError::Pgm("header number too long".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PipeError::Pgm("bad header number".into()))
    }

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PipeError::Pgm("not a binary PGM (missing P5 magic)".into()));
    }
    let mut pos = 2usize;
    let width = read_number(bytes, &mut pos)?;
    let height = read_number(bytes, &mut pos)?;
    let maxval = read_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(PipeError::Pgm(format!("maxval {maxval}, expected 255")));
    }
    if width != height {
        return Err(PipeError::Pgm(format!("image {width}x{height} not square")));
    }
    if width == 0 || width > MAX_IMAGE_SIZE {
        return Err(PipeError::Pgm(format!("image size {width} out of range")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PipeError::Pgm("missing raster separator".into()));
    }
    pos += 1;
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(PipeError::Pgm(format!(
            "raster truncated: need {need} bytes, have {}",
            raster.len()
        )));
    }
    if raster.len() > need {
        return Err(PipeError::Pgm("trailing bytes after raster".into()));
    }
    let pixels = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(GrayImage::new(width, pixels))
}

/// Writes a binary 8-bit PGM, quantizing [0,1] pixels to bytes.
pub fn write_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.size, image.size).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// `<YYYYMMDDTHHMMSSZ>_<exposure_ms>.pgm`
pub fn frame_file_name(timestamp: i64, exposure_ms: u32) -> String {
    let dt: DateTime<Utc> = Utc.timestamp_opt(timestamp, 0).single().expect("valid time");
    format!("{}_{}.pgm", dt.format("%Y%m%dT%H%M%SZ"), exposure_ms)
}

/// Inverse of [`frame_file_name`]; `None` for unrelated files.
pub fn parse_frame_file_name(name: &str) -> Option<(i64, u32)> {
    let stem = name.strip_suffix(".pgm")?;
    let (ts, exp) = stem.split_once('_')?;
    let exposure: u32 = exp.parse().ok()?;
    let dt = chrono::NaiveDateTime::parse_from_str(ts, "%Y%m%dT%H%M%SZ").ok()?;
    Some((dt.and_utc().timestamp(), exposure))
}

// ── power CSV ──────────────────────────────────────────────────────

pub const POWER_CSV_HEADER: &str = "timestamp,power_w";

/// Parses the raw power CSV. Timestamps must be ISO-8601 UTC and
/// strictly increasing; powers finite and non-negative.
pub fn parse_power_csv(text: &str) -> Result<PowerSeries> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == POWER_CSV_HEADER => {}
        _ => {
            return Err(PipeError::Csv {
                line: 1,
                reason: format!("missing `{POWER_CSV_HEADER}` header"),
            })
        }
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (ts, power) = line.split_once(',').ok_or_else(|| PipeError::Csv {
            line: line_no,
            reason: "expected `timestamp,power_w`".into(),
        })?;
        let dt = DateTime::parse_from_rfc3339(ts.trim()).map_err(|e| PipeError::Csv {
            line: line_no,
            reason: format!("bad timestamp `{}`: {e}", ts.trim()),
        })?;
        let p: f64 = power.trim().parse().map_err(|_| PipeError::Csv {
            line: line_no,
            reason: format!("bad power `{}`", power.trim()),
        })?;
        if !p.is_finite() || p < 0.0 {
            return Err(PipeError::Csv {
                line: line_no,
                reason: format!("power {p} out of range"),
            });
        }
        let t = dt.with_timezone(&Utc).timestamp();
        if let Some(&(prev, _)) = entries.last() {
            if t <= prev {
                return Err(PipeError::Csv {
                    line: line_no,
                    reason: "timestamps must be strictly increasing".into(),
                });
            }
        }
        entries.push((t, p));
    }
    PowerSeries::new(entries)
}

pub fn write_power_csv(series: &PowerSeries) -> String {
    let mut out = String::from(POWER_CSV_HEADER);
    out.push('\n');
    for &(t, p) in series.entries() {
        let dt: DateTime<Utc> = Utc.timestamp_opt(t, 0).single().expect("valid time");
        out.push_str(&format!("{},{}\n", dt.format("%Y-%m-%dT%H:%M:%SZ"), p));
    }
    out
}

// ── dataset loading ────────────────────────────────────────────────

/// What the loader kept and dropped, for operator visibility.
#[derive(Debug, Default, Clone)]
pub struct LoadReport {
    pub filter: FilterStats,
    /// Minutes whose frame set was incomplete (missing files).
    pub incomplete_stacks: usize,
    /// Frame files whose name did not parse.
    pub alien_files: usize,
}

pub fn read_metadata(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("metadata.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| PipeError::Meta(e.to_string()))
}

/// Loads and preprocesses a dataset directory: minute averaging, stack
/// assembly (sorted by timestamp then exposure, so discovery order is
/// irrelevant), invalid-minute filtering, HDR sky intensities and solar
/// positions.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, LoadReport)> {
    let meta = read_metadata(dir)?;
    let power_path = dir.join("power.csv");
    let mut text = String::new();
    std::fs::File::open(&power_path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(&power_path, e))?;
    let raw = parse_power_csv(&text)?;
    let minutes = minute_average(&raw);

    let mut report = LoadReport::default();

    // Discover frames, keyed and ordered by (timestamp, exposure).
    let frames_dir = dir.join("frames");
    let mut frame_files: BTreeMap<(i64, u32), PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(&frames_dir).map_err(|e| io_err(&frames_dir, e))? {
        let entry = entry.map_err(|e| io_err(&frames_dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else {
            report.alien_files += 1;
            continue;
        };
        match parse_frame_file_name(name) {
            Some(key) => {
                frame_files.insert(key, entry.path());
            }
            None => report.alien_files += 1,
        }
    }

    // Assemble one stack per minute that has all 20 frames.
    let mut pairs: Vec<(i64, f64, ExposureStack)> = Vec::new();
    for &(minute, power) in minutes.entries() {
        let mut channels = Vec::with_capacity(INSTANTS_PER_MINUTE * EXPOSURES_MS.len());
        let mut complete = true;
        'instants: for i in 0..INSTANTS_PER_MINUTE {
            let t = minute - (INSTANTS_PER_MINUTE as i64 - 1 - i as i64) * INSTANT_SPACING_S;
            for &exp in &EXPOSURES_MS {
                match frame_files.get(&(t, exp)) {
                    Some(path) => {
                        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
                        let img = parse_pgm(&bytes)?;
                        if img.size != meta.resolution {
                            return Err(PipeError::Pgm(format!(
                                "{}: size {} does not match metadata resolution {}",
                                path.display(),
                                img.size,
                                meta.resolution
                            )));
                        }
                        channels.push(img);
                    }
                    None => {
                        complete = false;
                        break 'instants;
                    }
                }
            }
        }
        if !complete {
            report.incomplete_stacks += 1;
            continue;
        }
        pairs.push((minute, power, ExposureStack { minute, channels }));
    }

    let (kept, stats) = filter_invalid(pairs);
    report.filter = stats;

    // Group into days following the metadata day list.
    let angles = geometry::solid_angles(meta.resolution.max(16));
    let mut days: Vec<DayRecords> = meta
        .days
        .iter()
        .map(|d| {
            Ok(DayRecords {
                date: NaiveDate::parse_from_str(&d.date, "%Y-%m-%d")
                    .map_err(|e| PipeError::Meta(format!("bad date `{}`: {e}", d.date)))?,
                weather: d.weather,
                minutes: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let day_lookup: std::collections::HashMap<NaiveDate, usize> = days
        .iter()
        .enumerate()
        .map(|(i, d)| (d.date, i))
        .collect();

    for (minute, power, stack) in kept {
        let date = Utc
            .timestamp_opt(minute, 0)
            .single()
            .expect("valid time")
            .date_naive();
        let Some(&day_idx) = day_lookup.get(&date) else {
            continue; // data outside the metadata day list
        };
        let sun = solar_position(minute, meta.latitude_deg, meta.longitude_deg);
        let radiance = hdr_merge(&stack.current_instant(), &EXPOSURES_MS)?;
        let sky = if meta.resolution >= 16 {
            geometry::sky_intensity(&radiance, &angles)?
        } else {
            0.0
        };
        days[day_idx].minutes.push(MinuteRecord {
            timestamp: minute,
            power_w: power,
            stack,
            sun,
            sky_intensity: sky,
        });
    }

    Ok((Dataset { meta, days }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_roundtrip() {
        let img = GrayImage::new(4, (0..16).map(|i| i as f32 / 15.0).collect());
        let bytes = write_pgm(&img);
        let back = parse_pgm(&bytes).unwrap();
        assert_eq!(back.size, 4);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_accepts_comments() {
        let bytes = b"P5 # a comment\n# another\n 2 2\n255\n\x00\x40\x80\xff".to_vec();
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.size, 2);
        assert_eq!(img.pixels[3], 1.0);
    }

    #[test]
    fn pgm_rejects_bad_inputs() {
        assert!(parse_pgm(b"P6\n2 2\n255\n0000").is_err()); // wrong magic
        assert!(parse_pgm(b"P5\n2 2\n65535\n0000").is_err()); // 16-bit
        assert!(parse_pgm(b"P5\n2 3\n255\n000000").is_err()); // not square
        assert!(parse_pgm(b"P5\n2 2\n255\n00").is_err()); // truncated
        assert!(parse_pgm(b"P5\n2 2\n255\n00000").is_err()); // trailing
        assert!(parse_pgm(b"P5\n99999999 99999999\n255\n").is_err()); // huge
    }

    #[test]
    fn frame_names_roundtrip() {
        let ts = chrono::NaiveDate::from_ymd_opt(2017, 6, 1)
            .unwrap()
            .and_hms_opt(6, 45, 0)
            .unwrap()
            .and_utc()
            .timestamp();
        let name = frame_file_name(ts, 88);
        assert_eq!(name, "20170601T064500Z_88.pgm");
        assert_eq!(parse_frame_file_name(&name), Some((ts, 88)));
        assert_eq!(parse_frame_file_name("notes.txt"), None);
        assert_eq!(parse_frame_file_name("20170601T064500Z_88.png"), None);
    }

    #[test]
    fn power_csv_roundtrip_and_errors() {
        let series = PowerSeries::new(vec![(1496301900, 123.5), (1496301901, 130.0)]).unwrap();
        let text = write_power_csv(&series);
        assert!(text.starts_with("timestamp,power_w\n"));
        let back = parse_power_csv(&text).unwrap();
        assert_eq!(back.entries(), series.entries());

        let bad_header = "time,power\n2017-06-01T06:45:00Z,1.0\n";
        assert!(matches!(
            parse_power_csv(bad_header),
            Err(PipeError::Csv { line: 1, .. })
        ));
        let bad_power = "timestamp,power_w\n2017-06-01T06:45:00Z,abc\n";
        assert!(matches!(
            parse_power_csv(bad_power),
            Err(PipeError::Csv { line: 2, .. })
        ));
        let decreasing =
            "timestamp,power_w\n2017-06-01T06:45:01Z,1.0\n2017-06-01T06:45:00Z,2.0\n";
        assert!(parse_power_csv(decreasing).is_err());
    }

    proptest! {
        #[test]
        fn pgm_parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = parse_pgm(&bytes);
        }

        #[test]
        fn csv_parser_never_panics(s in "\\PC*") {
            let _ = parse_power_csv(&s);
        }
    }
}
