//! Dataset ingestion and the canonical sample format.
//!
//! Everything downstream (field training, baseline fitting, evaluation)
//! consumes [`VelocitySample`]s. One stable CSV layout
//! (`date,person_id,t_sec,x_m,y_m,speed_mps,theta_rad`) decouples the
//! builders from source quirks; raw tracker logs are converted through
//! [`atc`], synthetic benchmarks come from [`synth`].

pub mod atc;
pub mod synth;

use crate::swgmm::wrap_angle;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Axis-aligned world rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl WorldBounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, DataError> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(DataError::Contract(format!(
                "degenerate bounds [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    /// Affine map into `[-1, 1]^2`. Points outside are clamped to the
    /// boundary; the flag reports whether clamping happened.
    pub fn normalize(&self, x: f64, y: f64) -> ((f64, f64), bool) {
        let ux = 2.0 * (x - self.x_min) / self.width() - 1.0;
        let uy = 2.0 * (y - self.y_min) / self.height() - 1.0;
        let clamped = !(-1.0..=1.0).contains(&ux) || !(-1.0..=1.0).contains(&uy);
        ((ux.clamp(-1.0, 1.0), uy.clamp(-1.0, 1.0)), clamped)
    }

    /// Inverse of [`WorldBounds::normalize`] on the unit square.
    pub fn denormalize(&self, ux: f64, uy: f64) -> (f64, f64) {
        (
            self.x_min + (ux + 1.0) / 2.0 * self.width(),
            self.y_min + (uy + 1.0) / 2.0 * self.height(),
        )
    }

    /// Tight bounds of a sample set, padded by `margin` meters.
    pub fn from_samples(samples: &[VelocitySample], margin: f64) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Contract("no samples to bound".into()));
        }
        let mut b = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for s in samples {
            b.0 = b.0.min(s.x);
            b.1 = b.1.max(s.x);
            b.2 = b.2.min(s.y);
            b.3 = b.3.max(s.y);
        }
        Self::new(b.0 - margin, b.1 + margin, b.2 - margin, b.3 + margin)
    }
}

/// Time-of-day normalized to `[0, 1)`.
pub fn normalize_time(t_sec: f64) -> f64 {
    t_sec / SECONDS_PER_DAY
}

/// One motion observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocitySample {
    pub date: NaiveDate,
    pub person_id: u64,
    pub t_sec: f64,
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
    #[serde(rename = "speed_mps")]
    pub speed: f64,
    #[serde(rename = "theta_rad")]
    pub theta: f64,
}

impl VelocitySample {
    pub fn new(
        date: NaiveDate,
        person_id: u64,
        t_sec: f64,
        x: f64,
        y: f64,
        speed: f64,
        theta: f64,
    ) -> Result<Self, DataError> {
        if !(0.0..SECONDS_PER_DAY).contains(&t_sec) {
            return Err(DataError::Contract(format!(
                "t_sec {t_sec} outside [0, 86400)"
            )));
        }
        if !speed.is_finite() || speed < 0.0 {
            return Err(DataError::Contract(format!("bad speed {speed}")));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(DataError::Contract(format!("non-finite position ({x}, {y})")));
        }
        let theta = wrap_angle(theta)
            .map_err(|e| DataError::Contract(format!("bad orientation: {e}")))?;
        Ok(Self {
            date,
            person_id,
            t_sec,
            x,
            y,
            speed,
            theta,
        })
    }

    pub fn velocity(&self) -> crate::swgmm::Velocity {
        crate::swgmm::Velocity {
            speed: self.speed,
            orientation: self.theta,
        }
    }
}

/// Reads the canonical CSV, validating every row's invariants.
pub fn read_canonical_csv(path: &Path) -> Result<Vec<VelocitySample>, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<VelocitySample>() {
        let raw = row.map_err(|e| csv_error(path, e))?;
        // re-run the constructor so invariants hold for file input too
        let s = VelocitySample::new(
            raw.date, raw.person_id, raw.t_sec, raw.x, raw.y, raw.speed, raw.theta,
        )?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_canonical_csv(path: &Path, samples: &[VelocitySample]) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in samples {
        writer.serialize(s).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.display().to_string(),
            source,
        },
        kind => DataError::Format {
            path: path.display().to_string(),
            detail: format!("{kind:?}"),
        },
    }
}

/// Partition by the date field. The date sets must be disjoint; samples in
/// neither set are dropped and counted.
pub fn split_by_date(
    samples: &[VelocitySample],
    train_dates: &BTreeSet<NaiveDate>,
    test_dates: &BTreeSet<NaiveDate>,
) -> Result<(Vec<VelocitySample>, Vec<VelocitySample>, usize), DataError> {
    if train_dates.intersection(test_dates).next().is_some() {
        return Err(DataError::Contract(
            "train and test date sets overlap".into(),
        ));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut excluded = 0usize;
    for s in samples {
        if train_dates.contains(&s.date) {
            train.push(*s);
        } else if test_dates.contains(&s.date) {
            test.push(*s);
        } else {
            excluded += 1;
        }
    }
    Ok((train, test, excluded))
}
