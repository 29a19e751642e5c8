//! Stochastic EM: incremental per-cell mixture updates as batches arrive.
//!
//! The E-step of batch EM is replaced by a stochastic approximation of the
//! sufficient statistics, `s ← s + γ_n (ŝ(batch) - s)` with step size
//! `γ_n = (n + 2)^-0.7` (Robbins-Monro: Σγ = ∞, Σγ² < ∞); the M-step is the
//! exact one shared with batch EM.

use super::em::{estep_stats, init_from_modes, mstep, CompStats, EmOptions};
use super::meanshift::{mean_shift_modes, Bandwidths};
use super::BaselineError;
use crate::swgmm::{Swgmm, Velocity};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemOptions {
    /// Step-size decay exponent: `γ_n = (n + 2)^-exponent`.
    pub gamma_exponent: f64,
    pub bandwidths: Bandwidths,
    pub em: EmOptions,
}

impl Default for SemOptions {
    fn default() -> Self {
        Self {
            gamma_exponent: 0.7,
            bandwidths: Bandwidths::default(),
            em: EmOptions::default(),
        }
    }
}

/// Per-cell state: the current mixture, the running sufficient statistics,
/// and how many batches have been absorbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemState {
    pub mixture: Swgmm,
    pub stats: Vec<CompStats>,
    pub batches_seen: usize,
}

impl SemState {
    /// Build-style initialization from the first batch: mean-shift modes,
    /// then a single EM iteration whose statistics seed the accumulators.
    pub fn init(batch: &[Velocity], opts: &SemOptions) -> Result<Self, BaselineError> {
        if batch.len() < 2 {
            return Err(BaselineError::Contract(format!(
                "sEM init needs at least 2 samples, got {}",
                batch.len()
            )));
        }
        let modes = mean_shift_modes(batch, opts.bandwidths)?;
        let init = init_from_modes(&modes, &opts.em)?;
        let (stats, _) = estep_stats(batch, &init);
        let mixture = mstep(&stats, &opts.em)?;
        // keep accumulators aligned with the surviving components
        let stats = aligned_stats(&stats, &mixture, &opts.em);
        Ok(Self {
            mixture,
            stats,
            batches_seen: 1,
        })
    }

    pub fn gamma(&self, opts: &SemOptions) -> f64 {
        ((self.batches_seen + 2) as f64).powf(-opts.gamma_exponent)
    }
}

/// Absorb one batch with the schedule's step size. Empty batches leave the
/// state untouched and do not advance the counter.
pub fn sem_update(
    state: &mut SemState,
    batch: &[Velocity],
    opts: &SemOptions,
) -> Result<(), BaselineError> {
    let gamma = state.gamma(opts);
    sem_update_with_gamma(state, batch, gamma, opts)
}

/// Update with an explicit step size. `γ = 0` must leave the state unchanged
/// and `γ = 1` must reproduce one batch-EM iteration exactly; both are
/// exercised by tests.
pub fn sem_update_with_gamma(
    state: &mut SemState,
    batch: &[Velocity],
    gamma: f64,
    opts: &SemOptions,
) -> Result<(), BaselineError> {
    if batch.is_empty() {
        return Ok(());
    }
    if gamma != 0.0 {
        let (fresh, _) = estep_stats(batch, &state.mixture);
        let blended: Vec<CompStats> = state
            .stats
            .iter()
            .zip(&fresh)
            .map(|(old, new)| old.blend(new, gamma))
            .collect();
        let mixture = mstep(&blended, &opts.em)?;
        state.stats = aligned_stats(&blended, &mixture, &opts.em);
        state.mixture = mixture;
    }
    state.batches_seen += 1;
    Ok(())
}

/// Drops accumulator rows for components the M-step removed, keeping the
/// statistics vector aligned with the mixture.
fn aligned_stats(stats: &[CompStats], mixture: &Swgmm, opts: &EmOptions) -> Vec<CompStats> {
    if stats.len() == mixture.num_components() {
        return stats.to_vec();
    }
    let total: f64 = stats.iter().map(|s| s.mass).sum();
    stats
        .iter()
        .filter(|s| s.mass / total >= opts.weight_floor)
        .copied()
        .collect()
}
