//! Expectation-maximization for semi-wrapped mixtures.
//!
//! The E-step assigns responsibilities jointly over components and winding
//! numbers k ∈ {-1, 0, 1}; the M-step is the exact weighted-moment update
//! with the angular mean re-wrapped into `[0, 2π)` afterwards. Sufficient
//! statistics are kept in per-sample-normalized form so the same M-step
//! serves both batch EM and the stochastic variant in
//! [`online`](super::online).

use super::BaselineError;
use crate::swgmm::{
    logsumexp, wrap_angle, Swgmm, SwgmmComponent, SwndParams, Velocity, WINDINGS,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    /// Stop when the total log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iters: usize,
    /// Diagonal covariance floor applied at every M-step.
    pub var_floor: f64,
    /// Components whose weight drops below this are removed.
    pub weight_floor: f64,
    /// Initial variances for components seeded from mean-shift modes.
    pub init_var_speed: f64,
    pub init_var_orientation: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iters: 100,
            var_floor: 1e-6,
            weight_floor: 1e-6,
            init_var_speed: 0.09,
            init_var_orientation: 0.1225,
        }
    }
}

/// Correlation magnitude cap keeping M-step covariances positive definite
/// when the data is (numerically) collinear.
const CORR_CAP: f64 = 0.999;

/// Per-sample-normalized sufficient statistics of one component: the mean
/// responsibility mass and responsibility-weighted first/second moments of
/// `(ρ, θ + 2πk)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompStats {
    pub mass: f64,
    pub sum_speed: f64,
    pub sum_theta: f64,
    pub sum_speed_sq: f64,
    pub sum_theta_sq: f64,
    pub sum_cross: f64,
}

impl CompStats {
    pub fn zero() -> Self {
        Self {
            mass: 0.0,
            sum_speed: 0.0,
            sum_theta: 0.0,
            sum_speed_sq: 0.0,
            sum_theta_sq: 0.0,
            sum_cross: 0.0,
        }
    }

    /// `self + gamma * (other - self)`, the stochastic-approximation blend.
    pub fn blend(&self, other: &Self, gamma: f64) -> Self {
        let mix = |a: f64, b: f64| a + gamma * (b - a);
        Self {
            mass: mix(self.mass, other.mass),
            sum_speed: mix(self.sum_speed, other.sum_speed),
            sum_theta: mix(self.sum_theta, other.sum_theta),
            sum_speed_sq: mix(self.sum_speed_sq, other.sum_speed_sq),
            sum_theta_sq: mix(self.sum_theta_sq, other.sum_theta_sq),
            sum_cross: mix(self.sum_cross, other.sum_cross),
        }
    }
}

/// Winding-aware E-step. Returns per-component statistics normalized by the
/// sample count (so component masses sum to 1) and the total log-likelihood
/// of the batch under `mixture`.
pub fn estep_stats(samples: &[Velocity], mixture: &Swgmm) -> (Vec<CompStats>, f64) {
    let j = mixture.num_components();
    let mut stats = vec![CompStats::zero(); j];
    let mut total_ll = 0.0;
    let mut terms = vec![0.0f64; j * 3];
    for v in samples {
        for (c, comp) in mixture.components.iter().enumerate() {
            let log_w = comp.weight.ln();
            for (ki, k) in WINDINGS.iter().enumerate() {
                terms[c * 3 + ki] = log_w + wound_logpdf(v, &comp.params, *k);
            }
        }
        let li = logsumexp(&terms);
        total_ll += li;
        if li == f64::NEG_INFINITY {
            // no component explains this sample at all; skip its stats
            continue;
        }
        for c in 0..j {
            for (ki, k) in WINDINGS.iter().enumerate() {
                let gamma = (terms[c * 3 + ki] - li).exp();
                if gamma == 0.0 {
                    continue;
                }
                let theta = v.orientation + k;
                let s = &mut stats[c];
                s.mass += gamma;
                s.sum_speed += gamma * v.speed;
                s.sum_theta += gamma * theta;
                s.sum_speed_sq += gamma * v.speed * v.speed;
                s.sum_theta_sq += gamma * theta * theta;
                s.sum_cross += gamma * v.speed * theta;
            }
        }
    }
    let n = samples.len() as f64;
    for s in &mut stats {
        s.mass /= n;
        s.sum_speed /= n;
        s.sum_theta /= n;
        s.sum_speed_sq /= n;
        s.sum_theta_sq /= n;
        s.sum_cross /= n;
    }
    (stats, total_ll)
}

/// One bivariate Gaussian log-density term at winding offset `k`.
fn wound_logpdf(v: &Velocity, p: &SwndParams, k: f64) -> f64 {
    let one_minus_r2 = 1.0 - p.corr * p.corr;
    let zs = (v.speed - p.mean_speed) / p.var_speed.sqrt();
    let zt = (v.orientation + k - p.mean_orientation) / p.var_orientation.sqrt();
    let quad = (zs * zs - 2.0 * p.corr * zs * zt + zt * zt) / one_minus_r2;
    -TAU.ln() - 0.5 * (p.var_speed.ln() + p.var_orientation.ln() + one_minus_r2.ln()) - 0.5 * quad
}

/// Exact M-step from normalized sufficient statistics. Components below the
/// weight floor are dropped; variances are floored; the angular mean is
/// wrapped back into `[0, 2π)`.
pub fn mstep(stats: &[CompStats], opts: &EmOptions) -> Result<Swgmm, BaselineError> {
    let mut components = Vec::with_capacity(stats.len());
    let total_mass: f64 = stats.iter().map(|s| s.mass).sum();
    if total_mass <= 0.0 {
        return Err(BaselineError::Contract(
            "no responsibility mass in M-step".into(),
        ));
    }
    for s in stats {
        let weight = s.mass / total_mass;
        if weight < opts.weight_floor {
            continue;
        }
        let mu_s = s.sum_speed / s.mass;
        let mu_t = s.sum_theta / s.mass;
        let var_s = (s.sum_speed_sq / s.mass - mu_s * mu_s).max(opts.var_floor);
        let var_t = (s.sum_theta_sq / s.mass - mu_t * mu_t).max(opts.var_floor);
        let cov = s.sum_cross / s.mass - mu_s * mu_t;
        let corr = (cov / (var_s * var_t).sqrt()).clamp(-CORR_CAP, CORR_CAP);
        components.push(SwgmmComponent {
            weight,
            params: SwndParams {
                mean_speed: mu_s.max(0.0),
                mean_orientation: wrap_angle(mu_t)
                    .map_err(|e| BaselineError::Contract(format!("M-step angle: {e}")))?,
                var_speed: var_s,
                var_orientation: var_t,
                corr,
            },
        });
    }
    if components.is_empty() {
        return Err(BaselineError::Contract(
            "all components collapsed below the weight floor".into(),
        ));
    }
    // renormalize after any removals
    let w_sum: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= w_sum;
    }
    Ok(Swgmm { components })
}

/// Result of a batch EM fit.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: Swgmm,
    /// Total log-likelihood after each iteration's E-step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
}

/// Initial mixture from mode locations: equal weights, diagonal covariance
/// at the configured initial spread.
pub fn init_from_modes(modes: &[Velocity], opts: &EmOptions) -> Result<Swgmm, BaselineError> {
    if modes.is_empty() {
        return Err(BaselineError::Contract("need at least one init mode".into()));
    }
    let w = 1.0 / modes.len() as f64;
    Ok(Swgmm {
        components: modes
            .iter()
            .map(|m| SwgmmComponent {
                weight: w,
                params: SwndParams {
                    mean_speed: m.speed,
                    mean_orientation: m.orientation,
                    var_speed: opts.init_var_speed,
                    var_orientation: opts.init_var_orientation,
                    corr: 0.0,
                },
            })
            .collect(),
    })
}

/// Batch EM: E/M iterations until the total log-likelihood improves by less
/// than `opts.tol` or the iteration cap is reached.
pub fn em_fit_swgmm(
    samples: &[Velocity],
    init_modes: &[Velocity],
    opts: &EmOptions,
) -> Result<EmFit, BaselineError> {
    if samples.len() < 2 {
        return Err(BaselineError::Contract(format!(
            "EM needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let mut mixture = init_from_modes(init_modes, opts)?;
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        let (stats, ll) = estep_stats(samples, &mixture);
        mixture = mstep(&stats, opts)?;
        trace.push(ll);
        iterations += 1;
        if ll.is_finite() && prev_ll.is_finite() && (ll - prev_ll).abs() < opts.tol {
            break;
        }
        prev_ll = ll;
    }
    Ok(EmFit {
        mixture,
        loglik_trace: trace,
        iterations,
    })
}
