//! Tape-based batched forward pass and NLL loss for the field.
//!
//! Mirrors the plain per-sample path (`NemoField::query` followed by
//! `swgmm_logpdf`) exactly, but over a whole minibatch as matrix rows and
//! differentiable w.r.t. every parameter group. The mixture likelihood is
//! assembled in log space: per component, the three winding terms combine
//! through an elementwise log-sum-exp; per sample, log-weights plus
//! component log-densities combine through a row log-sum-exp.

use super::{NemoField, TemporalEncoder, SIREN_OMEGA_FIRST, SIREN_OMEGA_HIDDEN};
use super::{CORR_SCALE, LOGVAR_CLAMP};
use crate::autodiff::{NodeId, Tape, TapeError, Tensor2};
use crate::data::{normalize_time, VelocitySample};
use crate::field::{fourier_features, grid24_row};
use std::f64::consts::TAU;

/// Batch views precomputed from samples: normalized coordinates, grid-space
/// positions, encoder-specific lookups, and the observed velocities.
pub struct FieldBatch {
    pub len: usize,
    pub grid_coords: Vec<(f64, f64)>,
    pub coords_norm: Tensor2,
    pub t_norm: Tensor2,
    pub speeds: Tensor2,
    pub thetas: Tensor2,
    grid24_rows: Vec<usize>,
    fourier: Option<Tensor2>,
}

impl FieldBatch {
    /// Out-of-bounds samples are clamped to the boundary and counted on the
    /// field's warning counter.
    pub fn new(field: &NemoField, samples: &[VelocitySample]) -> Self {
        let m = samples.len();
        let mut grid_coords = Vec::with_capacity(m);
        let mut coords = Vec::with_capacity(2 * m);
        let mut ts = Vec::with_capacity(m);
        let mut speeds = Vec::with_capacity(m);
        let mut thetas = Vec::with_capacity(m);
        let mut grid24_rows = Vec::new();
        let mut fourier_rows = Vec::new();
        let (is_grid24, fourier_freqs) = match &field.tenc {
            TemporalEncoder::Grid24 { .. } => (true, None),
            TemporalEncoder::Fourier { freqs } => (false, Some(*freqs)),
            TemporalEncoder::Siren { .. } => (false, None),
        };
        for s in samples {
            let ((ux, uy), clamped) = field.grid.bounds.normalize(s.x, s.y);
            if clamped {
                field.note_boundary_clamp();
            }
            let t = normalize_time(s.t_sec);
            grid_coords.push(field.grid.grid_coords(ux, uy));
            coords.push(ux);
            coords.push(uy);
            ts.push(t);
            speeds.push(s.speed);
            thetas.push(s.theta);
            if is_grid24 {
                grid24_rows.push(grid24_row(t, super::TEMPORAL_BINS));
            }
            if let Some(freqs) = fourier_freqs {
                fourier_rows.extend(fourier_features(t, freqs));
            }
        }
        Self {
            len: m,
            grid_coords,
            coords_norm: Tensor2::new(m, 2, coords),
            t_norm: Tensor2::new(m, 1, ts),
            speeds: Tensor2::new(m, 1, speeds),
            thetas: Tensor2::new(m, 1, thetas),
            grid24_rows,
            fourier: fourier_freqs
                .map(|freqs| Tensor2::new(m, 2 * freqs, fourier_rows)),
        }
    }
}

/// Handles into a built loss graph.
pub struct LossGraph {
    /// Scalar `-(1/N) Σ log p(v_i | Φ(x_i, t_i))`.
    pub loss: NodeId,
    /// Per-sample log-likelihood column (`m x 1`).
    pub loglik: NodeId,
    /// Parameter leaves, aligned with [`NemoField::param_groups`] order.
    pub leaves: Vec<NodeId>,
}

/// Builds the batched NLL loss on `tape`.
pub fn loss_graph(
    field: &NemoField,
    tape: &mut Tape,
    batch: &FieldBatch,
) -> Result<LossGraph, TapeError> {
    assert!(batch.len > 0, "empty batch");
    let leaves: Vec<NodeId> = field
        .param_groups()
        .into_iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect::<Result<_, _>>()?;

    let grid_leaf = leaves[0];
    let (f_t, off) = match &field.tenc {
        TemporalEncoder::Siren { .. } => {
            let (w1, b1, w2, b2) = (leaves[1], leaves[2], leaves[3], leaves[4]);
            let t_node = tape.constant(batch.t_norm.clone())?;
            let m1 = tape.matmul(t_node, w1)?;
            let pre1 = tape.add_row(m1, b1)?;
            let s1 = tape.scale(pre1, SIREN_OMEGA_FIRST)?;
            let h = tape.sin(s1)?;
            let m2 = tape.matmul(h, w2)?;
            let pre2 = tape.add_row(m2, b2)?;
            let s2 = tape.scale(pre2, SIREN_OMEGA_HIDDEN)?;
            (tape.sin(s2)?, 5)
        }
        TemporalEncoder::Grid24 { .. } => (tape.gather_rows(leaves[1], &batch.grid24_rows)?, 2),
        TemporalEncoder::Fourier { .. } => (
            tape.constant(batch.fourier.clone().expect("fourier batch features"))?,
            1,
        ),
    };
    let (mlp_w1, mlp_b1, mlp_w2, mlp_b2) =
        (leaves[off], leaves[off + 1], leaves[off + 2], leaves[off + 3]);
    let (film_wg, film_bg, film_wb, film_bb) = (
        leaves[off + 4],
        leaves[off + 5],
        leaves[off + 6],
        leaves[off + 7],
    );
    let (head_w, head_b) = (leaves[off + 8], leaves[off + 9]);

    let f_s = tape.gather_bilinear(grid_leaf, &batch.grid_coords, field.grid.h, field.grid.w)?;
    let xy = tape.constant(batch.coords_norm.clone())?;
    let t_raw = tape.constant(batch.t_norm.clone())?;
    let z = tape.concat_cols(&[xy, t_raw, f_s, f_t])?;

    let z1 = tape.matmul(z, mlp_w1)?;
    let a1 = tape.add_row(z1, mlp_b1)?;
    let h1 = tape.relu(a1)?;
    let z2 = tape.matmul(h1, mlp_w2)?;
    let a2 = tape.add_row(z2, mlp_b2)?;
    let h2 = tape.relu(a2)?;

    let gm = tape.matmul(f_t, film_wg)?;
    let gamma = tape.add_row(gm, film_bg)?;
    let bm = tape.matmul(f_t, film_wb)?;
    let beta = tape.add_row(bm, film_bb)?;
    let gated = tape.mul(gamma, h2)?;
    let fused = tape.add(gated, beta)?;
    let hm = tape.matmul(fused, head_w)?;
    let raw = tape.add_row(hm, head_b)?;

    let loglik = mixture_loglik(tape, raw, field.j, batch)?;
    let mean = tape.mean_all(loglik)?;
    let loss = tape.scale(mean, -1.0)?;
    Ok(LossGraph {
        loss,
        loglik,
        leaves,
    })
}

/// Mean batch NLL without keeping the tape (no gradients).
pub fn batch_nll(field: &NemoField, samples: &[VelocitySample]) -> Result<f64, TapeError> {
    let batch = FieldBatch::new(field, samples);
    let mut tape = Tape::new();
    let g = loss_graph(field, &mut tape, &batch)?;
    Ok(tape.value(g.loss).scalar_value())
}

/// Log-likelihood of each observed velocity under the mixture parameterized
/// by the raw head outputs (`m x 6J`).
fn mixture_loglik(
    tape: &mut Tape,
    raw: NodeId,
    j: usize,
    batch: &FieldBatch,
) -> Result<NodeId, TapeError> {
    let (lo, hi) = LOGVAR_CLAMP;
    let rw = tape.slice_cols(raw, 0, j)?;
    let rmu_speed = tape.slice_cols(raw, j, 2 * j)?;
    let rmu_theta = tape.slice_cols(raw, 2 * j, 3 * j)?;
    let rlv_speed = tape.slice_cols(raw, 3 * j, 4 * j)?;
    let rlv_theta = tape.slice_cols(raw, 4 * j, 5 * j)?;
    let rcorr = tape.slice_cols(raw, 5 * j, 6 * j)?;

    // log softmax over raw weights
    let lse_w = tape.logsumexp_row(rw)?;
    let log_w = tape.sub_col(rw, lse_w)?;

    let mu_speed = tape.relu(rmu_speed)?;
    let mu_theta = tape.wrap_two_pi(rmu_theta)?;
    let lv_speed = tape.clamp(rlv_speed, lo, hi)?;
    let lv_theta = tape.clamp(rlv_theta, lo, hi)?;
    let tanh_c = tape.tanh(rcorr)?;
    let corr = tape.scale(tanh_c, CORR_SCALE)?;

    let half_lv_s = tape.scale(lv_speed, 0.5)?;
    let sigma_speed = tape.exp(half_lv_s)?;
    let half_lv_t = tape.scale(lv_theta, 0.5)?;
    let sigma_theta = tape.exp(half_lv_t)?;

    let speeds = tape.constant(batch.speeds.clone())?;
    let thetas = tape.constant(batch.thetas.clone())?;

    // observed minus mean, broadcasting the m x 1 observation columns
    let neg_d_speed = tape.sub_col(mu_speed, speeds)?;
    let d_speed = tape.scale(neg_d_speed, -1.0)?;
    let neg_d_theta = tape.sub_col(mu_theta, thetas)?;
    let d_theta0 = tape.scale(neg_d_theta, -1.0)?;

    let z_speed = tape.div(d_speed, sigma_speed)?;
    let z_speed_sq = tape.mul(z_speed, z_speed)?;

    let corr_sq = tape.mul(corr, corr)?;
    let neg_corr_sq = tape.scale(corr_sq, -1.0)?;
    let one_minus_r2 = tape.add_scalar(neg_corr_sq, 1.0)?;
    let log_1mr2 = tape.log(one_minus_r2)?;

    // log det term + 2π constant, shared by all windings:
    // -ln 2π - 0.5(lv_s + lv_t + ln(1-r²))
    let lv_sum = tape.add(lv_speed, lv_theta)?;
    let det_sum = tape.add(lv_sum, log_1mr2)?;

    let mut winding_terms = Vec::with_capacity(3);
    for k in [-TAU, 0.0, TAU] {
        let d_theta = if k == 0.0 {
            d_theta0
        } else {
            tape.add_scalar(d_theta0, k)?
        };
        let z_theta = tape.div(d_theta, sigma_theta)?;
        let z_theta_sq = tape.mul(z_theta, z_theta)?;
        let cross = tape.mul(z_speed, z_theta)?;
        let cross_r = tape.mul(corr, cross)?;
        let cross_2r = tape.scale(cross_r, 2.0)?;
        let quad_num_partial = tape.add(z_speed_sq, z_theta_sq)?;
        let quad_num = tape.sub(quad_num_partial, cross_2r)?;
        let quad = tape.div(quad_num, one_minus_r2)?;
        let inner = tape.add(det_sum, quad)?;
        let neg_half = tape.scale(inner, -0.5)?;
        winding_terms.push(tape.add_scalar(neg_half, -TAU.ln())?);
    }
    let log_swnd = tape.lse(&winding_terms)?;
    let mix = tape.add(log_w, log_swnd)?;
    tape.logsumexp_row(mix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, WorldBounds};
    use crate::field::{FieldConfig, TemporalVariant};
    use crate::swgmm::swgmm_logpdf;

    fn samples() -> Vec<VelocitySample> {
        let ds = synth::generate(&synth::stationary_config(1, 1, 64, 5)).unwrap();
        ds.train
    }

    fn field(variant: TemporalVariant) -> NemoField {
        let config = FieldConfig {
            c_s: 5,
            c_t: 4,
            temporal: variant,
            ..FieldConfig::default()
        };
        NemoField::new(WorldBounds::new(0.0, 8.0, 0.0, 3.0).unwrap(), &config, 21)
    }

    /// The batched tape loss must equal the mean of per-sample plain-path
    /// NLLs (query + swgmm_logpdf) to near machine precision.
    #[test]
    fn graph_loss_matches_plain_per_sample_path() {
        for variant in [
            TemporalVariant::Siren,
            TemporalVariant::Grid24,
            TemporalVariant::Fourier,
        ] {
            let f = field(variant);
            let batch_samples = samples();
            let loss = batch_nll(&f, &batch_samples).unwrap();
            let mean_plain = batch_samples
                .iter()
                .map(|s| -swgmm_logpdf(s.velocity(), &f.query(s.x, s.y, s.t_sec)).unwrap())
                .sum::<f64>()
                / batch_samples.len() as f64;
            assert!(
                (loss - mean_plain).abs() < 1e-12,
                "{variant:?}: graph {loss} vs plain {mean_plain}"
            );
        }
    }

    #[test]
    fn duplicating_samples_leaves_loss_unchanged() {
        let f = field(TemporalVariant::Siren);
        let s = samples();
        let doubled: Vec<_> = s.iter().chain(s.iter()).copied().collect();
        let a = batch_nll(&f, &s).unwrap();
        let b = batch_nll(&f, &doubled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    /// End-to-end gradients against finite differences for every parameter
    /// group and every temporal variant, on a small random configuration.
    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        for variant in [
            TemporalVariant::Siren,
            TemporalVariant::Grid24,
            TemporalVariant::Fourier,
        ] {
            let config = FieldConfig {
                c_s: 3,
                c_t: 3,
                j: 2,
                grid_cell_m: 3.0,
                temporal: variant,
            };
            let f = NemoField::new(
                WorldBounds::new(0.0, 8.0, 0.0, 3.0).unwrap(),
                &config,
                33,
            );
            let batch_samples: Vec<_> = samples().into_iter().take(4).collect();
            let report = check_field_gradients(&f, &batch_samples, 1e-6).unwrap();
            assert!(
                report.max_rel_err <= 1e-5,
                "{variant:?}: rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    pub(crate) struct FieldGradReport {
        pub max_rel_err: f64,
        pub worst: Option<(String, usize)>,
        pub suspect: usize,
    }

    /// Finite-difference oracle over every field parameter.
    pub(crate) fn check_field_gradients(
        field: &NemoField,
        samples: &[VelocitySample],
        step: f64,
    ) -> Result<FieldGradReport, TapeError> {
        let batch = FieldBatch::new(field, samples);
        let mut tape = Tape::with_boundary_margin(10.0 * step);
        let g = loss_graph(field, &mut tape, &batch)?;
        let grads = tape.backward(g.loss)?;
        let analytic: Vec<Tensor2> = g.leaves.iter().map(|&l| grads.wrt(l)).collect();

        let eval = |f: &NemoField| -> Result<(f64, bool), TapeError> {
            let mut tape = Tape::with_boundary_margin(10.0 * step);
            let g = loss_graph(f, &mut tape, &batch)?;
            Ok((tape.value(g.loss).scalar_value(), tape.subgradient_contact()))
        };

        let names: Vec<&'static str> = field.param_groups().iter().map(|(n, _)| *n).collect();
        let mut max_rel_err = 0.0;
        let mut worst = None;
        let mut suspect = 0usize;
        for (gi, name) in names.iter().enumerate() {
            let len = analytic[gi].len();
            for i in 0..len {
                let mut plus = field.clone();
                plus.param_groups_mut()[gi].1.data_mut()[i] += step;
                let (fp, cp) = eval(&plus)?;
                let mut minus = field.clone();
                minus.param_groups_mut()[gi].1.data_mut()[i] -= step;
                let (fm, cm) = eval(&minus)?;
                if cp || cm {
                    suspect += 1;
                    continue;
                }
                let fd = (fp - fm) / (2.0 * step);
                let ad = analytic[gi].data()[i];
                let rel = (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs());
                if rel > max_rel_err {
                    max_rel_err = rel;
                    worst = Some((name.to_string(), i));
                }
            }
        }
        Ok(FieldGradReport {
            max_rel_err,
            worst,
            suspect,
        })
    }

    /// Spatial continuity: nearby queries give nearly identical densities.
    #[test]
    fn logpdf_is_spatially_continuous() {
        let f = field(TemporalVariant::Siren);
        let v = crate::swgmm::Velocity::new(1.0, 0.5).unwrap();
        let delta = 1e-6;
        for (x, y) in [(1.0, 1.0), (4.5, 2.0), (7.2, 0.4)] {
            let a = swgmm_logpdf(v, &f.query(x, y, 30_000.0)).unwrap();
            let b = swgmm_logpdf(v, &f.query(x + delta, y, 30_000.0)).unwrap();
            assert!(
                (a - b).abs() <= 1e-4,
                "density jump {} at ({x}, {y})",
                (a - b).abs()
            );
        }
    }
}
