//! Temporal flow maps over discretized orientations.
//!
//! Each grid cell keeps 8 orientation bins; the fraction of the cell's
//! traffic falling in each bin, observed hourly, forms a bounded time series
//! modeled in the frequency domain: a static mean plus the `order` strongest
//! periodic components from a fixed candidate set of day-divisor periods.
//! Queries reconstruct the per-bin values at the requested time of day,
//! clamp them to `[0, 1]`, and normalize across bins.

use super::{cell_index, BaselineError};
use crate::data::{VelocitySample, SECONDS_PER_DAY};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;

pub const STEF_BINS: usize = 8;
pub const DEFAULT_ORDER: usize = 2;

/// Candidate periods (seconds): 1 day and its divisors down to 1 hour. All
/// divide 24 h, so reconstructions depend only on the time of day.
pub const CANDIDATE_PERIODS: [f64; 8] = [
    86_400.0, 43_200.0, 28_800.0, 21_600.0, 14_400.0, 10_800.0, 7_200.0, 3_600.0,
];

/// One periodic component of a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralComponent {
    pub amplitude: f64,
    pub phase: f64,
    pub period_secs: f64,
}

/// Frequency-domain model of a bounded time series: static mean plus up to
/// `order` periodic components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub p0: f64,
    pub components: Vec<SpectralComponent>,
}

impl Spectrum {
    /// Reconstructed value at absolute time `t` (seconds), clamped to
    /// `[0, 1]`.
    pub fn reconstruct(&self, t: f64) -> f64 {
        let mut v = self.p0;
        for c in &self.components {
            v += c.amplitude * (TAU * t / c.period_secs + c.phase).cos();
        }
        v.clamp(0.0, 1.0)
    }
}

/// Fits a spectrum to `(time_secs, value)` observations with values in
/// `[0, 1]` spanning at least one day. Picks the `order` candidate periods
/// with the largest amplitude. Series shorter than `2·order + 1` samples get
/// a static-only model.
pub fn fremen_fit(series: &[(f64, f64)], order: usize) -> Result<Spectrum, BaselineError> {
    if series.is_empty() {
        return Err(BaselineError::Contract("empty series".into()));
    }
    if let Some((t, v)) = series
        .iter()
        .find(|(_, v)| !(0.0..=1.0).contains(v) || !v.is_finite())
    {
        return Err(BaselineError::Contract(format!(
            "value {v} at t={t} outside [0, 1]"
        )));
    }
    let t_min = series.iter().map(|(t, _)| *t).fold(f64::MAX, f64::min);
    let t_max = series.iter().map(|(t, _)| *t).fold(f64::MIN, f64::max);
    if t_max - t_min < SECONDS_PER_DAY {
        return Err(BaselineError::Contract(format!(
            "series spans {:.0}s, less than one day",
            t_max - t_min
        )));
    }
    let n = series.len() as f64;
    let p0 = series.iter().map(|(_, v)| v).sum::<f64>() / n;
    if series.len() < 2 * order + 1 {
        return Ok(Spectrum {
            p0,
            components: vec![],
        });
    }
    let mut candidates: Vec<SpectralComponent> = CANDIDATE_PERIODS
        .iter()
        .map(|&period| {
            let omega = TAU / period;
            let mut re = 0.0;
            let mut im = 0.0;
            for &(t, v) in series {
                let centered = v - p0;
                re += centered * (omega * t).cos();
                im -= centered * (omega * t).sin();
            }
            re /= n;
            im /= n;
            SpectralComponent {
                amplitude: 2.0 * (re * re + im * im).sqrt(),
                phase: im.atan2(re),
                period_secs: period,
            }
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.amplitude
            .total_cmp(&a.amplitude)
            .then(a.period_secs.total_cmp(&b.period_secs))
    });
    candidates.truncate(order);
    Ok(Spectrum {
        p0,
        components: candidates,
    })
}

/// One grid cell: a spectrum per orientation bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StefCell {
    pub bins: Vec<Spectrum>,
    pub sample_count: usize,
}

/// Reconstructed orientation-bin distribution at a time of day: per-bin
/// values clamped to `[0, 1]` and normalized to sum to 1; an all-zero
/// reconstruction yields the uniform distribution.
pub fn stef_query_cell(cell: &StefCell, t_sec: f64) -> [f64; STEF_BINS] {
    let mut out = [0.0; STEF_BINS];
    for (o, s) in out.iter_mut().zip(&cell.bins) {
        *o = s.reconstruct(t_sec);
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return [1.0 / STEF_BINS as f64; STEF_BINS];
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Orientation bin of an angle in `[0, 2π)`.
pub fn orientation_bin(theta: f64) -> usize {
    ((theta / (TAU / STEF_BINS as f64)).floor() as usize).min(STEF_BINS - 1)
}

/// Width of one orientation bin in radians; divides bin probabilities to
/// form an orientation density.
pub const BIN_WIDTH: f64 = TAU / STEF_BINS as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StefMap {
    pub resolution: f64,
    pub order: usize,
    pub cells: BTreeMap<(i64, i64), StefCell>,
}

impl StefMap {
    /// Orientation-bin distribution at a location and time of day; uniform
    /// when the cell was never fitted.
    pub fn query(&self, x: f64, y: f64, t_sec: f64) -> [f64; STEF_BINS] {
        match self.cells.get(&cell_index(x, y, self.resolution)) {
            Some(cell) => stef_query_cell(cell, t_sec),
            None => [1.0 / STEF_BINS as f64; STEF_BINS],
        }
    }

    /// Orientation density (1/rad) of an observed angle.
    pub fn orientation_density(&self, x: f64, y: f64, t_sec: f64, theta: f64) -> f64 {
        self.query(x, y, t_sec)[orientation_bin(theta)] / BIN_WIDTH
    }
}

/// Builds the map: per cell and orientation bin, the hourly fraction of the
/// cell's samples falling in that bin forms the series handed to the
/// spectral fit. Hour slots with no traffic in a cell are skipped (the
/// series is non-uniformly sampled).
pub fn build_stef(
    train: &[VelocitySample],
    resolution: f64,
    order: usize,
    min_samples: usize,
) -> Result<StefMap, BaselineError> {
    if train.is_empty() {
        return Ok(StefMap {
            resolution,
            order,
            cells: BTreeMap::new(),
        });
    }
    let day0: NaiveDate = train.iter().map(|s| s.date).min().expect("nonempty");
    // (cell, day, hour) -> per-bin counts
    let mut slots: BTreeMap<((i64, i64), i64, u8), [u32; STEF_BINS]> = BTreeMap::new();
    let mut cell_totals: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for s in train {
        let cell = cell_index(s.x, s.y, resolution);
        let day = (s.date - day0).num_days();
        let hour = (s.t_sec / 3600.0).floor().clamp(0.0, 23.0) as u8;
        slots.entry((cell, day, hour)).or_insert([0; STEF_BINS])[orientation_bin(s.theta)] += 1;
        *cell_totals.entry(cell).or_insert(0) += 1;
    }

    let mut series: BTreeMap<(i64, i64), Vec<(f64, [f64; STEF_BINS])>> = BTreeMap::new();
    for ((cell, day, hour), counts) in slots {
        let total: u32 = counts.iter().sum();
        if total == 0 {
            continue;
        }
        let t = day as f64 * SECONDS_PER_DAY + (hour as f64 + 0.5) * 3600.0;
        let mut fracs = [0.0; STEF_BINS];
        for (f, &c) in fracs.iter_mut().zip(counts.iter()) {
            *f = c as f64 / total as f64;
        }
        series.entry(cell).or_default().push((t, fracs));
    }

    let mut cells = BTreeMap::new();
    for (cell, rows) in series {
        if cell_totals[&cell] < min_samples {
            continue;
        }
        let span = rows.last().expect("nonempty rows").0 - rows[0].0;
        let bins: Vec<Spectrum> = (0..STEF_BINS)
            .map(|b| {
                let bin_series: Vec<(f64, f64)> =
                    rows.iter().map(|(t, fr)| (*t, fr[b])).collect();
                if span >= SECONDS_PER_DAY {
                    fremen_fit(&bin_series, order)
                } else {
                    // single-day data cannot support periodic components
                    Ok(Spectrum {
                        p0: bin_series.iter().map(|(_, v)| v).sum::<f64>()
                            / bin_series.len() as f64,
                        components: vec![],
                    })
                }
            })
            .collect::<Result<_, _>>()?;
        cells.insert(
            cell,
            StefCell {
                bins,
                sample_count: cell_totals[&cell],
            },
        );
    }
    Ok(StefMap {
        resolution,
        order,
        cells,
    })
}
