//! Grid-discretized flow maps: one SWGMM per populated grid location, one
//! map per hour of the day.
//!
//! Each grid location aggregates the velocity samples within a fixed radius
//! of its center, seeds mixture components with mean shift, and fits them
//! with EM. Cells are fitted independently (and in parallel); per-cell input
//! is sorted first so the result is invariant to sample order. Queries at
//! unpopulated locations fall back to a single global mixture fitted on the
//! whole training set.

use super::em::{em_fit_swgmm, EmOptions};
use super::meanshift::{mean_shift_modes, Bandwidths};
use super::online::{sem_update, SemOptions, SemState};
use super::{cell_center, cell_index, cells_within_radius, BaselineError};
use crate::data::VelocitySample;
use crate::swgmm::{Swgmm, Velocity};
use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CliffParams {
    /// Grid spacing in meters.
    pub resolution: f64,
    /// Aggregation radius around each cell center (defaults to the
    /// resolution).
    pub radius: f64,
    /// Cells with fewer samples than this stay empty.
    pub min_samples: usize,
    pub bandwidths: Bandwidths,
    pub em: EmOptions,
}

impl Default for CliffParams {
    fn default() -> Self {
        Self {
            resolution: 1.0,
            radius: 1.0,
            min_samples: 5,
            bandwidths: Bandwidths::default(),
            em: EmOptions::default(),
        }
    }
}

/// One fitted grid location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffCell {
    pub location: (f64, f64),
    pub model: Swgmm,
    pub sample_count: usize,
}

/// A discretized map for one hour interval (or for all times when `hour` is
/// none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMod {
    pub resolution: f64,
    pub hour: Option<u8>,
    pub cells: BTreeMap<(i64, i64), CliffCell>,
}

impl GridMod {
    pub fn cell_at(&self, x: f64, y: f64) -> Option<&CliffCell> {
        self.cells.get(&cell_index(x, y, self.resolution))
    }
}

/// Groups sample indices by the grid cells whose radius captures them.
fn assign_to_cells(
    samples: &[VelocitySample],
    resolution: f64,
    radius: f64,
) -> BTreeMap<(i64, i64), Vec<usize>> {
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        for cell in cells_within_radius(s.x, s.y, resolution, radius) {
            cells.entry(cell).or_default().push(i);
        }
    }
    cells
}

/// Builds one grid map from samples already filtered to the target hour.
/// Aggregation is order-free: per-cell samples are sorted before fitting.
pub fn build_cliff(
    samples: &[VelocitySample],
    params: &CliffParams,
    hour: Option<u8>,
) -> Result<GridMod, BaselineError> {
    let assignments = assign_to_cells(samples, params.resolution, params.radius);
    let jobs: Vec<((i64, i64), Vec<Velocity>)> = assignments
        .into_iter()
        .filter(|(_, idx)| idx.len() >= params.min_samples)
        .map(|(cell, idx)| {
            let mut vs: Vec<Velocity> = idx.iter().map(|&i| samples[i].velocity()).collect();
            vs.sort_by(|a, b| {
                a.speed
                    .total_cmp(&b.speed)
                    .then(a.orientation.total_cmp(&b.orientation))
            });
            (cell, vs)
        })
        .collect();

    let fitted: Result<Vec<((i64, i64), CliffCell)>, BaselineError> = jobs
        .par_iter()
        .map(|(cell, vs)| {
            let modes = mean_shift_modes(vs, params.bandwidths)?;
            let fit = em_fit_swgmm(vs, &modes, &params.em)?;
            Ok((
                *cell,
                CliffCell {
                    location: cell_center(cell.0, cell.1, params.resolution),
                    model: fit.mixture,
                    sample_count: vs.len(),
                },
            ))
        })
        .collect();

    Ok(GridMod {
        resolution: params.resolution,
        hour,
        cells: fitted?.into_iter().collect(),
    })
}

/// Cap on the deterministic subsample used for the global fallback fit;
/// mean shift is quadratic and the fallback only needs to be coarse.
const GLOBAL_FIT_CAP: usize = 2000;

/// Single global mixture over the whole training set, used when a queried
/// cell has no fitted model.
pub fn fit_global_fallback(
    samples: &[VelocitySample],
    bandwidths: Bandwidths,
    em: &EmOptions,
) -> Result<Swgmm, BaselineError> {
    if samples.len() < 2 {
        return Err(BaselineError::Contract(
            "global fallback needs at least 2 samples".into(),
        ));
    }
    let stride = samples.len().div_ceil(GLOBAL_FIT_CAP);
    let mut vs: Vec<Velocity> = samples
        .iter()
        .step_by(stride)
        .map(|s| s.velocity())
        .collect();
    vs.sort_by(|a, b| {
        a.speed
            .total_cmp(&b.speed)
            .then(a.orientation.total_cmp(&b.orientation))
    });
    let modes = mean_shift_modes(&vs, bandwidths)?;
    Ok(em_fit_swgmm(&vs, &modes, em)?.mixture)
}

/// The batch baseline: separate grid maps per hour plus the global fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyCliff {
    pub params: CliffParams,
    pub maps: BTreeMap<u8, GridMod>,
    pub fallback: Swgmm,
}

impl HourlyCliff {
    pub fn query(&self, x: f64, y: f64, t_sec: f64) -> &Swgmm {
        let hour = (t_sec / 3600.0).floor().clamp(0.0, 23.0) as u8;
        self.maps
            .get(&hour)
            .and_then(|m| m.cell_at(x, y))
            .map(|c| &c.model)
            .unwrap_or(&self.fallback)
    }

    pub fn cell_count(&self) -> usize {
        self.maps.values().map(|m| m.cells.len()).sum()
    }
}

/// Splits samples by hour of day and fits one grid map per populated hour.
pub fn build_hourly_cliff(
    train: &[VelocitySample],
    params: &CliffParams,
) -> Result<HourlyCliff, BaselineError> {
    let fallback = fit_global_fallback(train, params.bandwidths, &params.em)?;
    let mut by_hour: BTreeMap<u8, Vec<VelocitySample>> = BTreeMap::new();
    for s in train {
        let hour = (s.t_sec / 3600.0).floor().clamp(0.0, 23.0) as u8;
        by_hour.entry(hour).or_default().push(*s);
    }
    let mut maps = BTreeMap::new();
    for (hour, samples) in by_hour {
        let map = build_cliff(&samples, params, Some(hour))?;
        if !map.cells.is_empty() {
            maps.insert(hour, map);
        }
    }
    Ok(HourlyCliff {
        params: *params,
        maps,
        fallback,
    })
}

/// The online baseline: per-hour grids of stochastic-EM states, updated one
/// `(date, hour)` batch at a time in chronological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineCliff {
    pub resolution: f64,
    pub radius: f64,
    pub min_samples: usize,
    pub sem: SemOptions,
    pub maps: BTreeMap<u8, BTreeMap<(i64, i64), SemState>>,
    pub fallback: Swgmm,
}

impl OnlineCliff {
    pub fn query(&self, x: f64, y: f64, t_sec: f64) -> &Swgmm {
        let hour = (t_sec / 3600.0).floor().clamp(0.0, 23.0) as u8;
        self.maps
            .get(&hour)
            .and_then(|m| m.get(&cell_index(x, y, self.resolution)))
            .map(|s| &s.mixture)
            .unwrap_or(&self.fallback)
    }

    pub fn cell_count(&self) -> usize {
        self.maps.values().map(|m| m.len()).sum()
    }
}

/// Builds the online map by streaming `(date, hour)` observation batches in
/// order: a cell's first batch runs the build-style init, later batches run
/// stochastic updates.
pub fn build_online_cliff(
    train: &[VelocitySample],
    params: &CliffParams,
    sem: &SemOptions,
) -> Result<OnlineCliff, BaselineError> {
    let fallback = fit_global_fallback(train, params.bandwidths, &params.em)?;
    let mut batches: BTreeMap<(NaiveDate, u8), Vec<VelocitySample>> = BTreeMap::new();
    for s in train {
        let hour = (s.t_sec / 3600.0).floor().clamp(0.0, 23.0) as u8;
        batches.entry((s.date, hour)).or_default().push(*s);
    }
    let mut maps: BTreeMap<u8, BTreeMap<(i64, i64), SemState>> = BTreeMap::new();
    for ((_, hour), samples) in batches {
        let hour_map = maps.entry(hour).or_default();
        let assignments = assign_to_cells(&samples, params.resolution, params.radius);
        // init and update jobs run in parallel per cell; results are merged
        // in deterministic cell order
        let jobs: Vec<((i64, i64), Vec<Velocity>, Option<SemState>)> = assignments
            .into_iter()
            .map(|(cell, idx)| {
                let mut vs: Vec<Velocity> =
                    idx.iter().map(|&i| samples[i].velocity()).collect();
                vs.sort_by(|a, b| {
                    a.speed
                        .total_cmp(&b.speed)
                        .then(a.orientation.total_cmp(&b.orientation))
                });
                let existing = hour_map.get(&cell).cloned();
                (cell, vs, existing)
            })
            .collect();
        let updated: Result<Vec<((i64, i64), Option<SemState>)>, BaselineError> = jobs
            .into_par_iter()
            .map(|(cell, vs, existing)| match existing {
                Some(mut state) => {
                    sem_update(&mut state, &vs, sem)?;
                    Ok((cell, Some(state)))
                }
                None => {
                    if vs.len() >= params.min_samples.max(2) {
                        Ok((cell, Some(SemState::init(&vs, sem)?)))
                    } else {
                        Ok((cell, None))
                    }
                }
            })
            .collect();
        for (cell, state) in updated?.into_iter() {
            if let Some(state) = state {
                hour_map.insert(cell, state);
            }
        }
    }
    Ok(OnlineCliff {
        resolution: params.resolution,
        radius: params.radius,
        min_samples: params.min_samples,
        sem: *sem,
        maps,
        fallback,
    })
}
