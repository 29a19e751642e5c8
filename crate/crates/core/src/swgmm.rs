//! Circular-linear probability primitives.
//!
//! Velocities pair a linear speed with a circular orientation, so plain
//! bivariate Gaussians do not fit them: probability mass near θ = 0 and
//! θ = 2π must be identified. The semi-wrapped normal distribution (SWND)
//! handles this by summing a bivariate Gaussian over integer windings of the
//! angular coordinate; a semi-wrapped Gaussian mixture (SWGMM) is a convex
//! combination of SWNDs and is the local motion model used by every map in
//! this crate.
//!
//! The winding sum is truncated to k ∈ {-1, 0, 1}, which is adequate as long
//! as the angular standard deviation stays below roughly one radian. All
//! densities are evaluated in log space; values that underflow come back as
//! `-inf` rather than erroring.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

/// Winding offsets used when evaluating the wrapped angular coordinate.
pub const WINDINGS: [f64; 3] = [-TAU, 0.0, TAU];

/// Determinants at or below this are treated as singular.
const DET_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, PartialEq)]
pub enum SwgmmError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate covariance: determinant {det:e} is at or below {floor:e}")]
    DegenerateCovariance { det: f64, floor: f64 },
}

/// Wraps an angle into `[0, 2π)`.
///
/// Errors on non-finite input; otherwise the result is congruent to `theta`
/// modulo 2π.
pub fn wrap_angle(theta: f64) -> Result<f64, SwgmmError> {
    if !theta.is_finite() {
        return Err(SwgmmError::NonFinite("angle"));
    }
    let mut w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if w >= TAU {
        w -= TAU;
    }
    Ok(w)
}

/// A single velocity observation: speed in m/s, orientation in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub speed: f64,
    pub orientation: f64,
}

impl Velocity {
    /// Builds a velocity, wrapping the orientation. Speed must be finite and
    /// non-negative.
    pub fn new(speed: f64, orientation: f64) -> Result<Self, SwgmmError> {
        if !speed.is_finite() {
            return Err(SwgmmError::NonFinite("speed"));
        }
        if speed < 0.0 {
            return Err(SwgmmError::InvalidParameter(format!(
                "speed must be non-negative, got {speed}"
            )));
        }
        Ok(Self {
            speed,
            orientation: wrap_angle(orientation)?,
        })
    }
}

/// Parameters of one semi-wrapped normal component.
///
/// The covariance is stored as `(var_speed, var_orientation, corr)` rather
/// than raw matrix entries, so positive definiteness holds by construction
/// whenever the invariants (`var_* > 0`, `|corr| < 1`) do.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwndParams {
    pub mean_speed: f64,
    pub mean_orientation: f64,
    pub var_speed: f64,
    pub var_orientation: f64,
    pub corr: f64,
}

impl SwndParams {
    pub fn new(
        mean_speed: f64,
        mean_orientation: f64,
        var_speed: f64,
        var_orientation: f64,
        corr: f64,
    ) -> Result<Self, SwgmmError> {
        let p = Self {
            mean_speed,
            mean_orientation: wrap_angle(mean_orientation)?,
            var_speed,
            var_orientation,
            corr,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SwgmmError> {
        for (name, v) in [
            ("mean_speed", self.mean_speed),
            ("mean_orientation", self.mean_orientation),
            ("var_speed", self.var_speed),
            ("var_orientation", self.var_orientation),
            ("corr", self.corr),
        ] {
            if !v.is_finite() {
                return Err(SwgmmError::NonFinite(name));
            }
        }
        if self.mean_speed < 0.0 {
            return Err(SwgmmError::InvalidParameter(format!(
                "mean_speed must be non-negative, got {}",
                self.mean_speed
            )));
        }
        if self.var_speed <= 0.0 || self.var_orientation <= 0.0 {
            return Err(SwgmmError::InvalidParameter(format!(
                "variances must be positive, got ({}, {})",
                self.var_speed, self.var_orientation
            )));
        }
        if self.corr.abs() >= 1.0 {
            return Err(SwgmmError::InvalidParameter(format!(
                "|corr| must be < 1, got {}",
                self.corr
            )));
        }
        if !(0.0..TAU).contains(&self.mean_orientation) {
            return Err(SwgmmError::InvalidParameter(format!(
                "mean_orientation must lie in [0, 2pi), got {}",
                self.mean_orientation
            )));
        }
        Ok(())
    }

    /// Covariance determinant `var_speed * var_orientation * (1 - corr^2)`.
    pub fn det(&self) -> f64 {
        self.var_speed * self.var_orientation * (1.0 - self.corr * self.corr)
    }
}

/// One weighted mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwgmmComponent {
    pub weight: f64,
    pub params: SwndParams,
}

/// A semi-wrapped Gaussian mixture: J ≥ 1 weighted SWND components whose
/// weights sum to 1 (within 1e-9).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Swgmm {
    pub components: Vec<SwgmmComponent>,
}

impl Swgmm {
    pub fn new(components: Vec<SwgmmComponent>) -> Result<Self, SwgmmError> {
        let m = Self { components };
        m.validate()?;
        Ok(m)
    }

    /// Single-component mixture.
    pub fn single(params: SwndParams) -> Self {
        Self {
            components: vec![SwgmmComponent {
                weight: 1.0,
                params,
            }],
        }
    }

    pub fn validate(&self) -> Result<(), SwgmmError> {
        if self.components.is_empty() {
            return Err(SwgmmError::InvalidParameter(
                "mixture needs at least one component".into(),
            ));
        }
        let mut total = 0.0;
        for c in &self.components {
            if !c.weight.is_finite() || !(0.0..=1.0).contains(&c.weight) {
                return Err(SwgmmError::InvalidParameter(format!(
                    "weight must lie in [0, 1], got {}",
                    c.weight
                )));
            }
            c.params.validate()?;
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(SwgmmError::InvalidParameter(format!(
                "weights must sum to 1 within 1e-9, got {total}"
            )));
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }
}

/// Log-density of the bivariate normal at offset `(d_speed, d_theta)` from
/// the mean, for the covariance implied by `p`.
fn gaussian_logpdf_at_offset(p: &SwndParams, d_speed: f64, d_theta: f64) -> f64 {
    let one_minus_r2 = 1.0 - p.corr * p.corr;
    let zs = d_speed / p.var_speed.sqrt();
    let zt = d_theta / p.var_orientation.sqrt();
    let quad = (zs * zs - 2.0 * p.corr * zs * zt + zt * zt) / one_minus_r2;
    -TAU.ln() - 0.5 * (p.var_speed.ln() + p.var_orientation.ln() + one_minus_r2.ln()) - 0.5 * quad
}

/// Log-density of the semi-wrapped normal, summing windings k ∈ {-1, 0, 1}
/// with a stable log-sum-exp.
///
/// Returns `-inf` cleanly when all three terms underflow. Errors if the
/// covariance determinant is at or below 1e-300.
pub fn swnd_logpdf(v: Velocity, p: &SwndParams) -> Result<f64, SwgmmError> {
    let det = p.det();
    if det <= DET_FLOOR {
        return Err(SwgmmError::DegenerateCovariance {
            det,
            floor: DET_FLOOR,
        });
    }
    let d_speed = v.speed - p.mean_speed;
    let base = v.orientation - p.mean_orientation;
    let mut terms = [0.0f64; 3];
    for (slot, k) in terms.iter_mut().zip(WINDINGS) {
        *slot = gaussian_logpdf_at_offset(p, d_speed, base + k);
    }
    Ok(logsumexp(&terms))
}

/// Log-density of the mixture: `log Σ_j w_j exp(swnd_logpdf(v, p_j))`.
pub fn swgmm_logpdf(v: Velocity, m: &Swgmm) -> Result<f64, SwgmmError> {
    let mut terms = Vec::with_capacity(m.components.len());
    for c in &m.components {
        terms.push(c.weight.ln() + swnd_logpdf(v, &c.params)?);
    }
    Ok(logsumexp(&terms))
}

/// Stable `log Σ exp(x_i)`; `-inf` inputs drop out, all-`-inf` gives `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Draws one velocity from the mixture: component by weight, then a
/// correlated 2-D Gaussian draw; orientation wrapped, speed clipped at 0.
pub fn swgmm_sample<R: Rng + ?Sized>(m: &Swgmm, rng: &mut R) -> Velocity {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut idx = m.components.len() - 1;
    for (j, c) in m.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            idx = j;
            break;
        }
    }
    let p = &m.components[idx].params;
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let speed = p.mean_speed + p.var_speed.sqrt() * z1;
    let theta = p.mean_orientation
        + p.var_orientation.sqrt() * (p.corr * z1 + (1.0 - p.corr * p.corr).sqrt() * z2);
    Velocity {
        speed: speed.max(0.0),
        // theta is finite by construction
        orientation: wrap_angle(theta).expect("finite sample"),
    }
}

/// Index of the largest-weight component; ties break to the lowest index.
pub fn dominant_component(m: &Swgmm) -> usize {
    let mut best = 0;
    for (j, c) in m.components.iter().enumerate().skip(1) {
        if c.weight > m.components[best].weight {
            best = j;
        }
    }
    best
}

/// Smallest absolute angular difference `a - b` on the circle, in `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(TAU);
    if d > TAU / 2.0 {
        d -= TAU;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(mean_speed: f64, mean_theta: f64, vs: f64, vt: f64) -> SwndParams {
        SwndParams::new(mean_speed, mean_theta, vs, vt, 0.0).unwrap()
    }

    /// Simpson-rule integral of exp(swnd_logpdf) over
    /// ρ ∈ [μρ - 8σρ, μρ + 8σρ], θ ∈ [0, 2π). Independent of the winding
    /// shortcut in the implementation only in the sense that it sums raw
    /// density values; resolution is chosen so quadrature error ≪ 1e-3.
    pub(crate) fn quadrature_mass(p: &SwndParams) -> f64 {
        let sr = p.var_speed.sqrt();
        let (lo, hi) = (p.mean_speed - 8.0 * sr, p.mean_speed + 8.0 * sr);
        let n = 512; // even
        let hs = (hi - lo) / n as f64;
        let ht = TAU / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let ws = simpson_weight(i, n);
            let speed = lo + i as f64 * hs;
            let mut row = 0.0;
            for j in 0..=n {
                let theta = (j as f64 * ht).min(TAU - 1e-15);
                let v = Velocity {
                    speed,
                    orientation: theta,
                };
                row += simpson_weight(j, n) * swnd_logpdf(v, p).unwrap().exp();
            }
            total += ws * row;
        }
        total * hs * ht / 9.0
    }

    fn simpson_weight(i: usize, n: usize) -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    }

    #[test]
    fn wrap_angle_examples() {
        assert_relative_eq!(wrap_angle(TAU + 0.5).unwrap(), 0.5, max_relative = 1e-12);
        assert_relative_eq!(
            wrap_angle(-std::f64::consts::FRAC_PI_2).unwrap(),
            3.0 * std::f64::consts::FRAC_PI_2,
            max_relative = 1e-12
        );
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn wrap_angle_always_in_range() {
        for i in -1000..1000 {
            let theta = i as f64 * 0.37;
            let w = wrap_angle(theta).unwrap();
            assert!((0.0..TAU).contains(&w), "{theta} wrapped to {w}");
        }
        // the rounding edge case: a tiny negative angle
        let w = wrap_angle(-1e-18).unwrap();
        assert!((0.0..TAU).contains(&w));
    }

    #[test]
    fn swnd_logpdf_tight_peak_matches_analytic() {
        let p = diag(1.0, 0.0, 0.01, 0.01);
        let v = Velocity {
            speed: 1.0,
            orientation: 0.0,
        };
        // k = ±1 terms are ~exp(-1974), far below underflow; only the k=0
        // term contributes: log(1/(2π·0.01)).
        let expected = -(TAU * 0.01).ln();
        assert_relative_eq!(swnd_logpdf(v, &p).unwrap(), expected, epsilon = 1e-10);
        assert_relative_eq!(expected, 2.7672, epsilon = 1e-4);
    }

    #[test]
    fn swnd_logpdf_wrap_equivalence() {
        let p = SwndParams::new(1.0, 0.1, 0.04, 0.09, 0.3).unwrap();
        let a = Velocity::new(1.0, TAU - 0.01).unwrap();
        let b = Velocity::new(1.0, -0.01).unwrap();
        // Velocity::new wraps, so these are the same point bit-for-bit.
        assert_eq!(a.orientation, b.orientation);
        assert_eq!(swnd_logpdf(a, &p).unwrap(), swnd_logpdf(b, &p).unwrap());
    }

    #[test]
    fn swnd_logpdf_invariant_under_winding_shifts() {
        let p = SwndParams::new(1.3, 5.9, 0.09, 0.25, -0.4).unwrap();
        let theta = 1.234;
        let base = swnd_logpdf(Velocity::new(0.8, theta).unwrap(), &p).unwrap();
        // Evaluating at the wrapped image is the same computation bit-for-bit.
        let wrapped = Velocity::new(0.8, wrap_angle(theta).unwrap()).unwrap();
        assert_eq!(swnd_logpdf(wrapped, &p).unwrap(), base);
        // Shifting by whole turns changes the float representation, so the
        // value is invariant only up to rounding of theta + 2πn itself.
        for n in [-3i32, -1, 1, 4] {
            let shifted = Velocity::new(0.8, theta + n as f64 * TAU).unwrap();
            assert_relative_eq!(
                swnd_logpdf(shifted, &p).unwrap(),
                base,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn swnd_mass_integrates_to_one() {
        let p = diag(1.0, 3.0, 0.25, 0.25);
        assert_relative_eq!(quadrature_mass(&p), 1.0, epsilon = 1e-3);
        // mean near the wrap seam
        let p = SwndParams::new(0.8, 0.05, 0.16, 0.49, 0.5).unwrap();
        assert_relative_eq!(quadrature_mass(&p), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn swnd_degenerate_covariance_rejected() {
        let p = SwndParams {
            mean_speed: 1.0,
            mean_orientation: 0.0,
            var_speed: 1e-160,
            var_orientation: 1e-160,
            corr: 0.0,
        };
        let v = Velocity::new(1.0, 0.0).unwrap();
        assert!(matches!(
            swnd_logpdf(v, &p),
            Err(SwgmmError::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn swnd_underflows_to_neg_inf() {
        // log-density stays finite far below exp underflow
        let p = diag(1.0, 3.0, 1e-4, 1e-4);
        let v = Velocity::new(100.0, 0.0).unwrap();
        let lp = swnd_logpdf(v, &p).unwrap();
        assert!(lp < -745.0);
        assert_eq!(lp.exp(), 0.0);
        // when the quadratic form itself overflows, -inf comes back cleanly
        let v = Velocity::new(1e160, 0.0).unwrap();
        assert_eq!(swnd_logpdf(v, &p).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn swgmm_single_component_equals_swnd() {
        let p = SwndParams::new(1.1, 0.3, 0.04, 0.09, 0.2).unwrap();
        let m = Swgmm::single(p);
        let v = Velocity::new(1.0, 0.5).unwrap();
        // log(1.0) = 0 exactly, so the values agree bit-for-bit.
        assert_eq!(swgmm_logpdf(v, &m).unwrap(), swnd_logpdf(v, &p).unwrap());
    }

    #[test]
    fn swgmm_identical_halves_collapse() {
        let p = SwndParams::new(1.1, 0.3, 0.04, 0.09, 0.2).unwrap();
        let m = Swgmm::new(vec![
            SwgmmComponent {
                weight: 0.5,
                params: p,
            },
            SwgmmComponent {
                weight: 0.5,
                params: p,
            },
        ])
        .unwrap();
        let v = Velocity::new(0.9, 0.1).unwrap();
        assert_relative_eq!(
            swgmm_logpdf(v, &m).unwrap(),
            swnd_logpdf(v, &p).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn swgmm_matches_direct_summation() {
        let m = Swgmm::new(vec![
            SwgmmComponent {
                weight: 0.7,
                params: SwndParams::new(1.0, 0.2, 0.04, 0.09, 0.1).unwrap(),
            },
            SwgmmComponent {
                weight: 0.3,
                params: SwndParams::new(1.5, 3.3, 0.09, 0.16, -0.2).unwrap(),
            },
        ])
        .unwrap();
        let v = Velocity::new(1.2, 0.4).unwrap();
        let direct: f64 = m
            .components
            .iter()
            .map(|c| c.weight * swnd_logpdf(v, &c.params).unwrap().exp())
            .sum();
        assert_relative_eq!(
            swgmm_logpdf(v, &m).unwrap(),
            direct.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn swgmm_logpdf_bracketed_by_max_term() {
        let m = Swgmm::new(vec![
            SwgmmComponent {
                weight: 0.6,
                params: SwndParams::new(1.0, 0.2, 0.04, 0.09, 0.1).unwrap(),
            },
            SwgmmComponent {
                weight: 0.4,
                params: SwndParams::new(1.5, 3.3, 0.09, 0.16, -0.2).unwrap(),
            },
        ])
        .unwrap();
        let j = m.components.len() as f64;
        for (speed, theta) in [(0.5, 0.0), (1.2, 3.0), (2.0, 5.5)] {
            let v = Velocity::new(speed, theta).unwrap();
            let lp = swgmm_logpdf(v, &m).unwrap();
            let max_term = m
                .components
                .iter()
                .map(|c| c.weight.ln() + swnd_logpdf(v, &c.params).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(lp >= max_term);
            assert!(lp <= max_term + j.ln() + 1e-12);
        }
    }

    #[test]
    fn sample_collapsed_covariance_returns_mean() {
        let p = SwndParams::new(1.0, 2.0, 1e-12, 1e-12, 0.0).unwrap();
        let m = Swgmm::single(p);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v = swgmm_sample(&m, &mut rng);
            assert_relative_eq!(v.speed, 1.0, epsilon = 1e-4);
            assert_relative_eq!(v.orientation, 2.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn sample_component_frequencies_match_weights() {
        let m = Swgmm::new(vec![
            SwgmmComponent {
                weight: 0.7,
                params: diag(1.0, 0.0, 0.0001, 0.0001),
            },
            SwgmmComponent {
                weight: 0.3,
                params: diag(5.0, 3.0, 0.0001, 0.0001),
            },
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut first = 0usize;
        for _ in 0..n {
            let v = swgmm_sample(&m, &mut rng);
            if v.speed < 3.0 {
                first += 1;
            }
        }
        let freq = first as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn negative_mean_speed_rejected() {
        assert!(SwndParams::new(-1.0, 0.0, 0.01, 0.01, 0.0).is_err());
        assert!(Velocity::new(-0.5, 0.0).is_err());
    }

    #[test]
    fn dominant_component_ties_break_low() {
        let p = diag(1.0, 0.0, 0.01, 0.01);
        let mk = |ws: &[f64]| {
            Swgmm::new(
                ws.iter()
                    .map(|&w| SwgmmComponent { weight: w, params: p })
                    .collect(),
            )
            .unwrap()
        };
        assert_eq!(dominant_component(&mk(&[0.2, 0.5, 0.3])), 1);
        assert_eq!(dominant_component(&mk(&[0.5, 0.5])), 0);
        assert_eq!(dominant_component(&mk(&[1.0])), 0);
    }

    #[test]
    fn sampling_nll_matches_entropy_estimate() {
        let m = Swgmm::new(vec![
            SwgmmComponent {
                weight: 0.6,
                params: SwndParams::new(1.2, 0.4, 0.09, 0.16, 0.3).unwrap(),
            },
            SwgmmComponent {
                weight: 0.4,
                params: SwndParams::new(0.8, 3.5, 0.04, 0.09, 0.0).unwrap(),
            },
        ])
        .unwrap();
        let nll_of = |seed: u64, n: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                let v = swgmm_sample(&m, &mut rng);
                vals.push(-swgmm_logpdf(v, &m).unwrap());
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (mean, (var / n as f64).sqrt())
        };
        let (emp, se1) = nll_of(1, 10_000);
        let (entropy, se2) = nll_of(2, 10_000);
        let se = (se1 * se1 + se2 * se2).sqrt();
        assert!(
            (emp - entropy).abs() < 3.0 * se,
            "empirical {emp} vs entropy {entropy}, se {se}"
        );
    }

    #[test]
    fn invalid_mixtures_rejected() {
        let p = diag(1.0, 0.0, 0.01, 0.01);
        assert!(Swgmm::new(vec![]).is_err());
        assert!(Swgmm::new(vec![SwgmmComponent {
            weight: 0.9,
            params: p
        }])
        .is_err());
        assert!(SwndParams::new(1.0, 0.0, 0.01, 0.01, 1.0).is_err());
        assert!(SwndParams::new(1.0, 0.0, -0.01, 0.01, 0.0).is_err());
    }
}
