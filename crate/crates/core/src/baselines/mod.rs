//! Grid-based comparison maps: batch CLiFF (mean shift + EM per cell),
//! online CLiFF (stochastic EM per cell), and STeF (8 orientation bins with
//! frequency-domain temporal models per cell).

pub mod cliff;
pub mod em;
pub mod meanshift;
pub mod online;
pub mod stef;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Swgmm(#[from] crate::swgmm::SwgmmError),
}

/// Index of the grid cell containing a point.
pub fn cell_index(x: f64, y: f64, resolution: f64) -> (i64, i64) {
    (
        (x / resolution).floor() as i64,
        (y / resolution).floor() as i64,
    )
}

/// World position of a cell's center.
pub fn cell_center(ix: i64, iy: i64, resolution: f64) -> (f64, f64) {
    (
        (ix as f64 + 0.5) * resolution,
        (iy as f64 + 0.5) * resolution,
    )
}

/// All cells whose centers lie within `radius` of the point (inclusive, so a
/// boundary sample contributes to every tangent cell).
pub fn cells_within_radius(x: f64, y: f64, resolution: f64, radius: f64) -> Vec<(i64, i64)> {
    let (ix_lo, iy_lo) = cell_index(x - radius, y - radius, resolution);
    let (ix_hi, iy_hi) = cell_index(x + radius, y + radius, resolution);
    let mut out = Vec::new();
    for iy in iy_lo..=iy_hi {
        for ix in ix_lo..=ix_hi {
            let (cx, cy) = cell_center(ix, iy, resolution);
            let (dx, dy) = (x - cx, y - cy);
            if dx * dx + dy * dy <= radius * radius {
                out.push((ix, iy));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_indexing_roundtrip() {
        assert_eq!(cell_index(0.5, 0.5, 1.0), (0, 0));
        assert_eq!(cell_index(-0.1, 2.7, 1.0), (-1, 2));
        assert_eq!(cell_center(0, 0, 1.0), (0.5, 0.5));
        assert_eq!(cell_center(-1, 2, 2.0), (-1.0, 5.0));
    }

    #[test]
    fn boundary_sample_contributes_to_both_cells() {
        // point on the shared edge of cells (0,0) and (1,0), equidistant
        // from both centers at exactly the default radius
        let cells = cells_within_radius(1.0, 0.5, 1.0, 1.0);
        assert!(cells.contains(&(0, 0)));
        assert!(cells.contains(&(1, 0)));
    }

    #[test]
    fn radius_zero_hits_only_center() {
        let cells = cells_within_radius(0.5, 0.5, 1.0, 1e-9);
        assert_eq!(cells, vec![(0, 0)]);
    }
}
