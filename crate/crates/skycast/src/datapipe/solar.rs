//! Approximate solar position from time and site coordinates.
//!
//! Declination and the equation of time use the Spencer Fourier fits,
//! which keep the position within about a degree of ephemeris values —
//! enough for regression targets and for placing the simulator's sun.

use chrono::{DateTime, Datelike, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};

/// Sun direction in horizontal coordinates, radians. Azimuth is measured
/// from north, eastward positive, in [0, 2π); elevation is in
/// [−π/2, π/2].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolarPosition {
    pub azimuth: f64,
    pub elevation: f64,
}

/// Solar position for a unix timestamp at the given site.
pub fn solar_position(timestamp: i64, latitude_deg: f64, longitude_deg: f64) -> SolarPosition {
    let dt: DateTime<Utc> = Utc.timestamp_opt(timestamp, 0).single().expect("valid unix time");
    let day_of_year = dt.ordinal() as f64;
    let hour = dt.hour() as f64 + dt.minute() as f64 / 60.0 + dt.second() as f64 / 3600.0;

    // Spencer day-angle, declination, and equation of time.
    let gamma = 2.0 * std::f64::consts::PI / 365.0 * (day_of_year - 1.0 + (hour - 12.0) / 24.0);
    let decl = 0.006918 - 0.399912 * gamma.cos() + 0.070257 * gamma.sin()
        - 0.006758 * (2.0 * gamma).cos()
        + 0.000907 * (2.0 * gamma).sin()
        - 0.002697 * (3.0 * gamma).cos()
        + 0.00148 * (3.0 * gamma).sin();
    let eot_minutes = 229.18
        * (0.000075 + 0.001868 * gamma.cos()
            - 0.032077 * gamma.sin()
            - 0.014615 * (2.0 * gamma).cos()
            - 0.04089 * (2.0 * gamma).sin());

    let true_solar_minutes = hour * 60.0 + eot_minutes + 4.0 * longitude_deg;
    let hour_angle = (true_solar_minutes / 4.0 - 180.0).to_radians();

    let lat = latitude_deg.to_radians();
    let sin_el = lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos();
    let elevation = sin_el.clamp(-1.0, 1.0).asin();

    // Horizontal components of the sun vector.
    let east = -decl.cos() * hour_angle.sin();
    let north = decl.sin() * lat.cos() - decl.cos() * lat.sin() * hour_angle.cos();
    let mut azimuth = east.atan2(north);
    if azimuth < 0.0 {
        azimuth += 2.0 * std::f64::consts::PI;
    }
    SolarPosition { azimuth, elevation }
}

/// Highest-elevation position over one UTC day, scanned per minute.
/// Convenience for tests and the simulator.
pub fn solar_noon_elevation(date_start_unix: i64, latitude_deg: f64, longitude_deg: f64) -> f64 {
    (0..24 * 60)
        .map(|m| solar_position(date_start_unix + m * 60, latitude_deg, longitude_deg).elevation)
        .fold(f64::NEG_INFINITY, f64::max)
}
