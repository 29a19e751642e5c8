//! Seeded synthetic benchmarks with an exportable ground-truth model.
//!
//! Samples are drawn from semi-wrapped mixtures whose weights and means vary
//! with time of day (and mildly with position), so the generating
//! distribution at any query point is known in closed form. The exported
//! [`TruthModel`] answers the same queries as any fitted map, which makes
//! true per-sample log-densities — and therefore oracle NLL comparisons —
//! computable.

use super::{DataError, VelocitySample, WorldBounds, SECONDS_PER_DAY};
use crate::swgmm::{swgmm_sample, wrap_angle, Swgmm, SwgmmComponent, SwndParams};
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// One Gaussian bump in a daily activity profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityBump {
    pub center_hours: f64,
    pub width_hours: f64,
    pub amplitude: f64,
}

/// Daily activity level: a positive base plus Gaussian bumps, periodic over
/// 24 h (each bump is evaluated at t and t ± 24 h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub base: f64,
    pub bumps: Vec<ActivityBump>,
}

impl ActivityProfile {
    pub fn level(&self, t_sec: f64) -> f64 {
        let h = t_sec / 3600.0;
        let mut v = self.base;
        for b in &self.bumps {
            for image in [-24.0, 0.0, 24.0] {
                let d = (h - b.center_hours + image) / b.width_hours;
                v += b.amplitude * (-0.5 * d * d).exp();
            }
        }
        v
    }
}

/// One flow: a base direction (optionally drifting sinusoidally over the
/// day), speed statistics, angular spread, and a daily activity profile that
/// sets its mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub orientation: f64,
    /// Radians of sinusoidal orientation drift over the day:
    /// `θ(t) = orientation + drift · sin(2π t/day)`.
    pub drift_amplitude: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub sigma_theta: f64,
    pub corr: f64,
    pub activity: ActivityProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub bounds: WorldBounds,
    pub flows: Vec<FlowSpec>,
    /// Quadratic transverse speed reduction toward the y-edges, in `[0, 1)`.
    pub edge_slowdown: f64,
    pub days: u32,
    pub train_days: u32,
    pub samples_per_day: u32,
    pub base_date: NaiveDate,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.flows.is_empty() {
            return Err(DataError::Contract("need at least one flow".into()));
        }
        for f in &self.flows {
            if f.activity.base <= 0.0 {
                return Err(DataError::Contract(
                    "activity base must be positive so weights stay defined".into(),
                ));
            }
            if f.speed_std <= 0.0 || f.sigma_theta <= 0.0 || f.corr.abs() >= 1.0 {
                return Err(DataError::Contract("bad flow spread parameters".into()));
            }
            if f.speed_mean < 0.0 {
                return Err(DataError::Contract("negative mean speed".into()));
            }
        }
        if self.days == 0 || self.train_days == 0 || self.train_days > self.days {
            return Err(DataError::Contract(format!(
                "bad day split: {} train of {} total",
                self.train_days, self.days
            )));
        }
        if !(0.0..1.0).contains(&self.edge_slowdown) {
            return Err(DataError::Contract("edge_slowdown must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn truth(&self) -> TruthModel {
        TruthModel {
            bounds: self.bounds,
            flows: self.flows.clone(),
            edge_slowdown: self.edge_slowdown,
        }
    }
}

/// The generating model: answers `(x, y, t)` queries with the exact mixture
/// the samples were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthModel {
    pub bounds: WorldBounds,
    pub flows: Vec<FlowSpec>,
    pub edge_slowdown: f64,
}

impl TruthModel {
    fn speed_factor(&self, y: f64) -> f64 {
        let half = self.bounds.height() / 2.0;
        let yc = self.bounds.y_min + half;
        let edge = ((y - yc) / half).clamp(-1.0, 1.0);
        1.0 - self.edge_slowdown * edge * edge
    }

    fn component(&self, flow: &FlowSpec, y: f64, t_sec: f64) -> SwndParams {
        let theta = flow.orientation
            + flow.drift_amplitude * (TAU * t_sec / SECONDS_PER_DAY).sin();
        SwndParams {
            mean_speed: flow.speed_mean * self.speed_factor(y),
            mean_orientation: wrap_angle(theta).expect("finite orientation"),
            var_speed: flow.speed_std * flow.speed_std,
            var_orientation: flow.sigma_theta * flow.sigma_theta,
            corr: flow.corr,
        }
    }

    pub fn query(&self, _x: f64, y: f64, t_sec: f64) -> Swgmm {
        let total: f64 = self.flows.iter().map(|f| f.activity.level(t_sec)).sum();
        let components = self
            .flows
            .iter()
            .map(|f| SwgmmComponent {
                weight: f.activity.level(t_sec) / total,
                params: self.component(f, y, t_sec),
            })
            .collect();
        Swgmm { components }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<VelocitySample>,
    pub test: Vec<VelocitySample>,
    pub truth: TruthModel,
}

/// Draws the configured number of samples per day; the first `train_days`
/// days become the training split, the rest the test split. Fixed seeds give
/// bit-identical datasets.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset, DataError> {
    config.validate()?;
    let truth = config.truth();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // rejection envelope for the time-of-day distribution
    let total_activity =
        |t: f64| -> f64 { config.flows.iter().map(|f| f.activity.level(t)).sum() };
    let mut env = 0.0f64;
    for i in 0..=1440 {
        env = env.max(total_activity(i as f64 * 60.0));
    }
    env *= 1.05;

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut person_id = 0u64;
    for day in 0..config.days {
        let date = config
            .base_date
            .checked_add_days(chrono::Days::new(day as u64))
            .ok_or_else(|| DataError::Contract("date overflow".into()))?;
        let mut day_samples = Vec::with_capacity(config.samples_per_day as usize);
        for _ in 0..config.samples_per_day {
            let t = loop {
                let t = rng.random_range(0.0..SECONDS_PER_DAY);
                let u = rng.random_range(0.0..env);
                if u <= total_activity(t) {
                    break t;
                }
            };
            let x = rng.random_range(config.bounds.x_min..config.bounds.x_max);
            let y = rng.random_range(config.bounds.y_min..config.bounds.y_max);
            let mixture = truth.query(x, y, t);
            let v = swgmm_sample(&mixture, &mut rng);
            person_id += 1;
            day_samples.push(VelocitySample::new(
                date,
                person_id,
                t,
                x,
                y,
                v.speed,
                v.orientation,
            )?);
        }
        day_samples.sort_by(|a, b| {
            (a.t_sec, a.person_id)
                .partial_cmp(&(b.t_sec, b.person_id))
                .unwrap()
        });
        if day < config.train_days {
            train.extend(day_samples);
        } else {
            test.extend(day_samples);
        }
    }
    Ok(SynthDataset { train, test, truth })
}

/// Two opposing corridor flows with a morning/evening reversal: eastbound
/// peaks at 09:00, westbound at 18:00, both over the same corridor.
pub fn reversal_config(
    days: u32,
    train_days: u32,
    samples_per_day: u32,
    seed: u64,
) -> SynthConfig {
    SynthConfig {
        bounds: WorldBounds::new(0.0, 12.0, 0.0, 3.0).expect("static bounds"),
        flows: vec![
            FlowSpec {
                orientation: 0.0,
                drift_amplitude: 0.0,
                speed_mean: 1.25,
                speed_std: 0.25,
                sigma_theta: 0.22,
                corr: 0.25,
                activity: ActivityProfile {
                    base: 0.06,
                    bumps: vec![ActivityBump {
                        center_hours: 9.0,
                        width_hours: 1.6,
                        amplitude: 1.0,
                    }],
                },
            },
            FlowSpec {
                orientation: std::f64::consts::PI,
                drift_amplitude: 0.0,
                speed_mean: 1.0,
                speed_std: 0.22,
                sigma_theta: 0.22,
                corr: 0.0,
                activity: ActivityProfile {
                    base: 0.06,
                    bumps: vec![ActivityBump {
                        center_hours: 18.0,
                        width_hours: 1.6,
                        amplitude: 1.0,
                    }],
                },
            },
        ],
        edge_slowdown: 0.25,
        days,
        train_days,
        samples_per_day,
        base_date: NaiveDate::from_ymd_opt(2012, 10, 24).expect("static date"),
        seed,
    }
}

/// A single flow whose direction drifts smoothly over the day; exercises
/// continuous temporal encoders against binned ones.
pub fn drift_config(days: u32, train_days: u32, samples_per_day: u32, seed: u64) -> SynthConfig {
    SynthConfig {
        bounds: WorldBounds::new(0.0, 10.0, 0.0, 3.0).expect("static bounds"),
        flows: vec![FlowSpec {
            orientation: std::f64::consts::FRAC_PI_2,
            drift_amplitude: 1.5,
            speed_mean: 1.2,
            speed_std: 0.25,
            sigma_theta: 0.2,
            corr: 0.0,
            activity: ActivityProfile {
                base: 0.35,
                bumps: vec![ActivityBump {
                    center_hours: 13.0,
                    width_hours: 3.0,
                    amplitude: 0.8,
                }],
            },
        }],
        edge_slowdown: 0.15,
        days,
        train_days,
        samples_per_day,
        base_date: NaiveDate::from_ymd_opt(2012, 10, 24).expect("static date"),
        seed,
    }
}

/// Two time-invariant flows; the conditional distribution never changes.
pub fn stationary_config(
    days: u32,
    train_days: u32,
    samples_per_day: u32,
    seed: u64,
) -> SynthConfig {
    SynthConfig {
        bounds: WorldBounds::new(0.0, 8.0, 0.0, 3.0).expect("static bounds"),
        flows: vec![
            FlowSpec {
                orientation: 0.8,
                drift_amplitude: 0.0,
                speed_mean: 1.3,
                speed_std: 0.3,
                sigma_theta: 0.3,
                corr: 0.2,
                activity: ActivityProfile {
                    base: 0.65,
                    bumps: vec![],
                },
            },
            FlowSpec {
                orientation: 3.9,
                drift_amplitude: 0.0,
                speed_mean: 0.9,
                speed_std: 0.25,
                sigma_theta: 0.35,
                corr: 0.0,
                activity: ActivityProfile {
                    base: 0.35,
                    bumps: vec![],
                },
            },
        ],
        edge_slowdown: 0.0,
        days,
        train_days,
        samples_per_day,
        base_date: NaiveDate::from_ymd_opt(2012, 10, 24).expect("static date"),
        seed,
    }
}
