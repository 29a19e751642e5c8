//! Raw tracker-log ingestion (ATC-style CSV), downsampling, and velocity
//! derivation.
//!
//! The expected row layout is
//! `time_s,person_id,x_mm,y_mm,z_mm,velocity_mm_s,motion_angle_rad,facing_angle_rad`
//! with time as epoch seconds. Positions and speeds are converted to meters.
//! Malformed rows are tolerated and counted; more than 10% of them is
//! treated as a wrong file format.

use super::{DataError, VelocitySample, SECONDS_PER_DAY};
use chrono::{DateTime, Duration, NaiveDate};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Local-time offset applied when converting epoch seconds to a date and
/// seconds-of-day. The reference deployment is in Japan (UTC+9).
pub const DEFAULT_UTC_OFFSET_SECS: i64 = 9 * 3600;

/// Speeds below this have no usable orientation and are dropped.
pub const MIN_SPEED_MPS: f64 = 0.01;

/// One raw tracked point, in meters / seconds / radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub epoch_s: f64,
    pub person_id: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Tracker-provided speed, if the source has a velocity column.
    pub speed: Option<f64>,
    /// Tracker-provided motion direction, if available.
    pub motion_angle: Option<f64>,
    pub facing_angle: Option<f64>,
}

/// Parses an ATC-style CSV. Returns the points (unordered, as in the file)
/// and the number of malformed rows skipped.
pub fn parse_atc_csv(path: &Path) -> Result<(Vec<RawPoint>, usize), DataError> {
    let file = File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut points = Vec::new();
    let mut malformed = 0usize;
    let mut total = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_row(trimmed) {
            Some(p) => points.push(p),
            None => {
                // sniff a header: a non-numeric first row is not malformed data
                if lineno == 0 && !starts_numeric(trimmed) {
                    continue;
                }
                malformed += 1;
            }
        }
        total += 1;
    }
    if total > 0 && malformed as f64 > 0.1 * total as f64 {
        return Err(DataError::Format {
            path: path.display().to_string(),
            detail: format!("{malformed} of {total} rows malformed"),
        });
    }
    Ok((points, malformed))
}

fn starts_numeric(line: &str) -> bool {
    line.split(',')
        .next()
        .map(|f| f.trim().parse::<f64>().is_ok())
        .unwrap_or(false)
}

fn parse_row(line: &str) -> Option<RawPoint> {
    let mut fields = line.split(',').map(str::trim);
    let epoch_s: f64 = fields.next()?.parse().ok()?;
    let person_id: u64 = fields.next()?.parse::<f64>().ok()? as u64;
    let x_mm: f64 = fields.next()?.parse().ok()?;
    let y_mm: f64 = fields.next()?.parse().ok()?;
    let z_mm: f64 = fields.next()?.parse().ok()?;
    let v_mm: f64 = fields.next()?.parse().ok()?;
    let motion: f64 = fields.next()?.parse().ok()?;
    let facing: Option<f64> = fields.next().and_then(|f| f.parse().ok());
    if !epoch_s.is_finite() || !x_mm.is_finite() || !y_mm.is_finite() {
        return None;
    }
    Some(RawPoint {
        epoch_s,
        person_id,
        x: x_mm / 1000.0,
        y: y_mm / 1000.0,
        z: z_mm / 1000.0,
        speed: v_mm.is_finite().then_some(v_mm / 1000.0),
        motion_angle: motion.is_finite().then_some(motion),
        facing_angle: facing,
    })
}

/// Keeps the first point per person per `1/rate`-second window; windows are
/// aligned to integer seconds-of-day (epoch offsets are whole hours, so
/// aligning on epoch seconds is equivalent). Output is sorted by
/// `(person, time)` and the operation is idempotent at the same rate.
pub fn downsample(points: &[RawPoint], rate_hz: f64) -> Result<Vec<RawPoint>, DataError> {
    if !(rate_hz > 0.0) {
        return Err(DataError::Contract(format!("rate {rate_hz} must be > 0")));
    }
    let mut by_person: BTreeMap<u64, Vec<RawPoint>> = BTreeMap::new();
    for p in points {
        by_person.entry(p.person_id).or_default().push(*p);
    }
    let mut out = Vec::new();
    for (_, mut track) in by_person {
        track.sort_by(|a, b| a.epoch_s.total_cmp(&b.epoch_s));
        let mut last_window: Option<i64> = None;
        for p in track {
            let window = (p.epoch_s * rate_hz).floor() as i64;
            if last_window != Some(window) {
                out.push(p);
                last_window = Some(window);
            }
        }
    }
    Ok(out)
}

/// Derives velocity samples. Tracker-provided speed and motion angle are
/// trusted when present (less noise at 1 Hz than re-differencing); otherwise
/// forward finite differences over consecutive same-person points are used.
/// Near-stationary samples (speed < 0.01 m/s) are dropped: their orientation
/// is undefined.
pub fn derive_velocity(
    points: &[RawPoint],
    utc_offset_secs: i64,
) -> Result<Vec<VelocitySample>, DataError> {
    let mut by_person: BTreeMap<u64, Vec<RawPoint>> = BTreeMap::new();
    for p in points {
        by_person.entry(p.person_id).or_default().push(*p);
    }
    let mut out = Vec::new();
    for (person, mut track) in by_person {
        track.sort_by(|a, b| a.epoch_s.total_cmp(&b.epoch_s));
        for i in 0..track.len() {
            let p = track[i];
            let (speed, theta) = match (p.speed, p.motion_angle) {
                (Some(s), Some(a)) => (s, a),
                _ => {
                    // forward difference; the last point has no successor
                    if i + 1 >= track.len() {
                        continue;
                    }
                    let q = track[i + 1];
                    let dt = q.epoch_s - p.epoch_s;
                    if dt <= 0.0 {
                        continue;
                    }
                    let (dx, dy) = (q.x - p.x, q.y - p.y);
                    ((dx * dx + dy * dy).sqrt() / dt, dy.atan2(dx))
                }
            };
            if speed < MIN_SPEED_MPS {
                continue;
            }
            let (date, t_sec) = epoch_to_local(p.epoch_s, utc_offset_secs)?;
            out.push(VelocitySample::new(
                date, person, t_sec, p.x, p.y, speed, theta,
            )?);
        }
    }
    out.sort_by(|a, b| {
        (a.date, a.t_sec, a.person_id)
            .partial_cmp(&(b.date, b.t_sec, b.person_id))
            .unwrap()
    });
    Ok(out)
}

/// Converts epoch seconds to a local calendar date and seconds-of-day.
pub fn epoch_to_local(epoch_s: f64, utc_offset_secs: i64) -> Result<(NaiveDate, f64), DataError> {
    if !epoch_s.is_finite() {
        return Err(DataError::Contract(format!("non-finite time {epoch_s}")));
    }
    let whole = epoch_s.floor();
    let frac = epoch_s - whole;
    let utc = DateTime::from_timestamp(whole as i64, 0)
        .ok_or_else(|| DataError::Contract(format!("time {epoch_s} out of range")))?;
    let local = utc + Duration::seconds(utc_offset_secs);
    let date = local.date_naive();
    let t_sec = local.time().num_seconds_from_midnight_f64() + frac;
    // guard the open interval invariant against frac rounding
    Ok((date, t_sec.min(SECONDS_PER_DAY - 1e-6)))
}

trait TimeOfDay {
    fn num_seconds_from_midnight_f64(&self) -> f64;
}

impl TimeOfDay for chrono::NaiveTime {
    fn num_seconds_from_midnight_f64(&self) -> f64 {
        use chrono::Timelike;
        self.num_seconds_from_midnight() as f64
    }
}
