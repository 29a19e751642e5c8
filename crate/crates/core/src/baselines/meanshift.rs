//! Mean shift mode seeking on the speed-orientation cylinder.
//!
//! Every sample is iterated to its kernel-weighted local mode; orientation
//! offsets are wrapped so clusters straddling θ = 0 stay together. Converged
//! modes closer than half a bandwidth (in bandwidth-normalized distance) are
//! merged, first-seen wins.

use super::BaselineError;
use crate::swgmm::{wrap_angle, Velocity};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Kernel bandwidths for the two cylinder axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub speed: f64,
    pub orientation: f64,
}

impl Default for Bandwidths {
    fn default() -> Self {
        // scaled to typical pedestrian speed spread
        Self {
            speed: 0.3,
            orientation: 0.35,
        }
    }
}

/// Shift-magnitude convergence threshold.
pub const CONVERGENCE_PRECISION: f64 = 1e-5;
/// Iteration cap per seed.
pub const MAX_ITERATIONS: usize = 100;
/// Kernel argument beyond which a sample's weight (< 4e-6) is skipped; the
/// truncation is deterministic and keeps far clusters from dragging modes.
const KERNEL_CUTOFF: f64 = 25.0;

/// Signed angular offset `a - b` wrapped into `(-π, π]`.
#[inline]
fn wrapped_offset(a: f64, b: f64) -> f64 {
    let mut d = a - b;
    if d > PI {
        d -= TAU;
    } else if d <= -PI {
        d += TAU;
    }
    d
}

/// Runs mean shift from every sample and returns the deduplicated modes.
pub fn mean_shift_modes(
    samples: &[Velocity],
    bw: Bandwidths,
) -> Result<Vec<Velocity>, BaselineError> {
    if samples.is_empty() {
        return Err(BaselineError::Contract(
            "mean shift needs at least one sample".into(),
        ));
    }
    if !(bw.speed > 0.0 && bw.orientation > 0.0) {
        return Err(BaselineError::Contract(format!(
            "bandwidths must be positive, got ({}, {})",
            bw.speed, bw.orientation
        )));
    }

    let converged: Vec<Velocity> = samples
        .par_iter()
        .map(|seed| iterate_to_mode(*seed, samples, bw))
        .collect();

    // dedup within half a bandwidth, keeping the first-seen mode
    let mut modes: Vec<Velocity> = Vec::new();
    for m in converged {
        let duplicate = modes.iter().any(|existing| {
            let ds = (m.speed - existing.speed) / bw.speed;
            let dt = wrapped_offset(m.orientation, existing.orientation) / bw.orientation;
            (ds * ds + dt * dt).sqrt() <= 0.5
        });
        if !duplicate {
            modes.push(m);
        }
    }
    Ok(modes)
}

fn iterate_to_mode(seed: Velocity, samples: &[Velocity], bw: Bandwidths) -> Velocity {
    let mut speed = seed.speed;
    let mut theta = seed.orientation;
    for _ in 0..MAX_ITERATIONS {
        let mut weight_sum = 0.0;
        let mut speed_acc = 0.0;
        let mut theta_acc = 0.0;
        for s in samples {
            let ds = (s.speed - speed) / bw.speed;
            let dt = wrapped_offset(s.orientation, theta) / bw.orientation;
            let quad = ds * ds + dt * dt;
            if quad > KERNEL_CUTOFF {
                continue;
            }
            let w = (-0.5 * quad).exp();
            weight_sum += w;
            speed_acc += w * s.speed;
            // accumulate wrapped offsets around the current estimate so the
            // circular mean lands on the right side of the seam
            theta_acc += w * (dt * bw.orientation);
        }
        if weight_sum == 0.0 {
            break;
        }
        let new_speed = speed_acc / weight_sum;
        let new_theta = wrap_angle(theta + theta_acc / weight_sum).expect("finite angle");
        let shift_t = wrapped_offset(new_theta, theta);
        let shift_s = new_speed - speed;
        speed = new_speed;
        theta = new_theta;
        if (shift_s * shift_s + shift_t * shift_t).sqrt() < CONVERGENCE_PRECISION {
            break;
        }
    }
    Velocity {
        speed: speed.max(0.0),
        orientation: theta,
    }
}
