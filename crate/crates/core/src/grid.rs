//! Latitude-longitude grid geometry, latitude weights and spatial masks.
//!
//! Every loss and every aggregated metric goes through [`weighted_mean`] (or
//! the same weighting rule), so the reduction order here is fixed: row-major
//! over `(lat, lon)`.

use alloc::format;
use alloc::vec::Vec;

use crate::climatology::QuantileThresholds;
use crate::error::{Error, Result};

const LON_SPACING_TOL: f64 = 1e-9;

/// Regular latitude-longitude grid. Latitudes are strictly monotone, longitudes
/// uniformly spaced.
#[derive(Debug, Clone, PartialEq)]
pub struct LatLonGrid {
    latitudes: Vec<f64>,
    lon_start: f64,
    lon_step: f64,
    n_lon: usize,
}

impl LatLonGrid {
    pub fn new(latitudes: Vec<f64>, lon_start: f64, lon_step: f64, n_lon: usize) -> Result<Self> {
        if latitudes.is_empty() || n_lon == 0 {
            return Err(Error::DegenerateGrid("grid needs at least one row and one column".into()));
        }
        if latitudes.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(Error::DegenerateGrid("latitude outside [-90, 90]".into()));
        }
        let ascending = latitudes.windows(2).all(|w| w[1] > w[0]);
        let descending = latitudes.windows(2).all(|w| w[1] < w[0]);
        if !(ascending || descending) {
            return Err(Error::DegenerateGrid("latitudes must be strictly monotone".into()));
        }
        if !lon_start.is_finite() || !lon_step.is_finite() || (n_lon > 1 && lon_step <= 0.0) {
            return Err(Error::DegenerateGrid("longitude spacing must be positive".into()));
        }
        Ok(Self { latitudes, lon_start, lon_step, n_lon })
    }

    /// Builds a grid from explicit longitudes, checking uniform spacing.
    pub fn from_coordinates(latitudes: Vec<f64>, longitudes: &[f64]) -> Result<Self> {
        let n_lon = longitudes.len();
        if n_lon == 0 {
            return Err(Error::DegenerateGrid("no longitudes".into()));
        }
        let step = if n_lon > 1 { longitudes[1] - longitudes[0] } else { 0.0 };
        for (j, lon) in longitudes.iter().enumerate() {
            let expected = longitudes[0] + step * j as f64;
            if (lon - expected).abs() > LON_SPACING_TOL {
                return Err(Error::DegenerateGrid(format!(
                    "longitude {j} deviates from uniform spacing"
                )));
            }
        }
        Self::new(latitudes, longitudes[0], step, n_lon)
    }

    /// Global grid with cell-centred rows, ordered north to south. No row sits
    /// on a pole.
    pub fn cell_centered(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat == 0 || n_lon == 0 {
            return Err(Error::DegenerateGrid("grid needs at least one row and one column".into()));
        }
        let dlat = 180.0 / n_lat as f64;
        let latitudes = (0..n_lat).map(|i| 90.0 - (i as f64 + 0.5) * dlat).collect();
        Self::new(latitudes, 0.0, 360.0 / n_lon as f64, n_lon)
    }

    pub fn n_lat(&self) -> usize {
        self.latitudes.len()
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat() * self.n_lon
    }

    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    pub fn lon_start(&self) -> f64 {
        self.lon_start
    }

    pub fn lon_step(&self) -> f64 {
        self.lon_step
    }

    pub fn longitude(&self, j: usize) -> f64 {
        self.lon_start + self.lon_step * j as f64
    }

    pub fn longitudes(&self) -> Vec<f64> {
        (0..self.n_lon).map(|j| self.longitude(j)).collect()
    }

    pub fn is_north_to_south(&self) -> bool {
        self.latitudes.len() == 1 || self.latitudes[0] > self.latitudes[1]
    }
}

/// Per-row latitude weights `alpha_i = n_lat * cos(lat_i) / sum_k cos(lat_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights {
    alpha: Vec<f64>,
}

impl LatWeights {
    /// Unit weight on every row, for unweighted grid-point statistics.
    pub fn uniform(n_lat: usize) -> Self {
        Self { alpha: alloc::vec![1.0; n_lat] }
    }

    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::DegenerateGrid("weights must be finite and non-negative".into()));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn n_lat(&self) -> usize {
        self.alpha.len()
    }

    /// Weight of every cell in row-major order.
    pub fn per_cell(&self, n_lon: usize) -> Vec<f64> {
        self.alpha
            .iter()
            .flat_map(|a| core::iter::repeat(*a).take(n_lon))
            .collect()
    }
}

pub fn latitude_weights(grid: &LatLonGrid) -> Result<LatWeights> {
    let cosines: Vec<f64> = grid
        .latitudes()
        .iter()
        .map(|lat| {
            // cos(+-90 deg) is ~6e-17 in floating point; poles get exactly zero.
            if lat.abs() == 90.0 {
                0.0
            } else {
                libm::cos(lat.to_radians()).max(0.0)
            }
        })
        .collect();
    let total: f64 = cosines.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateGrid("cosine sum over latitude rows is zero".into()));
    }
    let n = grid.n_lat() as f64;
    Ok(LatWeights { alpha: cosines.iter().map(|c| n * c / total).collect() })
}

/// Boolean keep-mask over grid cells, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpatialMask {
    n_lat: usize,
    n_lon: usize,
    keep: Vec<bool>,
}

impl SpatialMask {
    pub fn full(n_lat: usize, n_lon: usize) -> Self {
        Self { n_lat, n_lon, keep: alloc::vec![true; n_lat * n_lon] }
    }

    pub fn from_keep(n_lat: usize, n_lon: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != n_lat * n_lon {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} cells, grid has {}",
                keep.len(),
                n_lat * n_lon
            )));
        }
        Ok(Self { n_lat, n_lon, keep })
    }

    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, cell: usize) -> bool {
        self.keep[cell]
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn intersect(&self, other: &SpatialMask) -> Result<SpatialMask> {
        self.check_same(other)?;
        let keep = self.keep.iter().zip(&other.keep).map(|(a, b)| *a && *b).collect();
        Ok(SpatialMask { n_lat: self.n_lat, n_lon: self.n_lon, keep })
    }

    pub fn complement(&self) -> SpatialMask {
        SpatialMask {
            n_lat: self.n_lat,
            n_lon: self.n_lon,
            keep: self.keep.iter().map(|k| !k).collect(),
        }
    }

    fn check_same(&self, other: &SpatialMask) -> Result<()> {
        if self.n_lat != other.n_lat || self.n_lon != other.n_lon {
            return Err(Error::ShapeMismatch("masks on different grids".into()));
        }
        Ok(())
    }
}

/// Latitude-weighted mean over the kept cells, summed in row-major order.
pub fn weighted_mean(values: &[f64], weights: &LatWeights, mask: &SpatialMask) -> Result<f64> {
    let n_lat = weights.n_lat();
    if mask.n_lat() != n_lat || values.len() != mask.keep().len() {
        return Err(Error::ShapeMismatch(format!(
            "values {} / weights {} rows / mask {}x{}",
            values.len(),
            n_lat,
            mask.n_lat(),
            mask.n_lon()
        )));
    }
    let n_lon = mask.n_lon();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut kept = 0usize;
    for (i, alpha) in weights.alpha().iter().enumerate() {
        for j in 0..n_lon {
            let cell = i * n_lon + j;
            if !mask.keep[cell] {
                continue;
            }
            let v = values[cell];
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("weighted_mean input at cell ({i}, {j})")));
            }
            num += alpha * v;
            den += alpha;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::EmptyMask);
    }
    if den <= 0.0 {
        return Err(Error::DegenerateGrid("kept cells carry zero total weight".into()));
    }
    Ok(num / den)
}

/// Which quantile boundary decides aridity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AridMetric {
    /// Lowest boundary (q20 for quintiles).
    Rpss,
    /// Highest boundary (q80 for quintiles).
    Bss,
}

pub const DEFAULT_ARID_CUTOFF_MM: f64 = 0.005;

/// Static arid mask: a cell is kept only if its relevant boundary exceeds
/// `cutoff` on every supplied threshold set (one per evaluated date/lead).
pub fn build_arid_mask(
    thresholds: &[&QuantileThresholds],
    n_lat: usize,
    n_lon: usize,
    metric: AridMetric,
    cutoff: f64,
) -> Result<SpatialMask> {
    if thresholds.is_empty() {
        return Err(Error::Empty("arid mask needs at least one threshold set".into()));
    }
    let n_cells = n_lat * n_lon;
    let mut keep = alloc::vec![true; n_cells];
    for thr in thresholds {
        if thr.n_cells() != n_cells {
            return Err(Error::ShapeMismatch(format!(
                "thresholds cover {} cells, grid has {n_cells}",
                thr.n_cells()
            )));
        }
        for (cell, k) in keep.iter_mut().enumerate() {
            let bounds = thr.cell(cell);
            let boundary = match metric {
                AridMetric::Rpss => bounds[0],
                AridMetric::Bss => bounds[bounds.len() - 1],
            };
            if boundary <= cutoff {
                *k = false;
            }
        }
    }
    SpatialMask::from_keep(n_lat, n_lon, keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn grid(lats: &[f64], n_lon: usize) -> LatLonGrid {
        LatLonGrid::new(lats.to_vec(), 0.0, 360.0 / n_lon as f64, n_lon).unwrap()
    }

    #[test]
    fn single_equator_row_has_unit_weight() {
        let w = latitude_weights(&grid(&[0.0], 4)).unwrap();
        assert_eq!(w.alpha(), &[1.0]);
    }

    #[test]
    fn pole_rows_get_zero_weight() {
        let w = latitude_weights(&grid(&[-90.0, 0.0, 90.0], 4)).unwrap();
        assert_eq!(w.alpha(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn cosine_ratio_weights() {
        // cos 0 = 1, cos 60 = 0.5, total 1.5
        let w = latitude_weights(&grid(&[0.0, 60.0], 1)).unwrap();
        assert!((w.alpha()[0] - 2.0 / 1.5).abs() < 1e-12);
        assert!((w.alpha()[1] - 1.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn only_poles_is_degenerate() {
        let err = latitude_weights(&grid(&[90.0, -90.0], 2)).unwrap_err();
        assert!(matches!(err, Error::DegenerateGrid(_)));
    }

    #[test]
    fn rejects_non_monotone_latitudes() {
        assert!(LatLonGrid::new(vec![10.0, 20.0, 15.0], 0.0, 1.0, 3).is_err());
        assert!(LatLonGrid::from_coordinates(vec![0.0], &[0.0, 1.0, 2.5]).is_err());
    }

    #[test]
    fn hand_weighted_mean() {
        let w = LatWeights::from_alpha(vec![4.0 / 3.0, 2.0 / 3.0]).unwrap();
        let mask = SpatialMask::full(2, 1);
        let m = weighted_mean(&[3.0, 0.0], &w, &mask).unwrap();
        assert!((m - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_give_arithmetic_mean() {
        let w = LatWeights::uniform(2);
        let m = weighted_mean(&[1.0, 2.0, 3.0, 6.0], &w, &SpatialMask::full(2, 2)).unwrap();
        assert!((m - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_and_nan_are_errors() {
        let w = LatWeights::uniform(1);
        let empty = SpatialMask::from_keep(1, 2, vec![false, false]).unwrap();
        assert_eq!(weighted_mean(&[1.0, 2.0], &w, &empty), Err(Error::EmptyMask));
        let half = SpatialMask::from_keep(1, 2, vec![true, false]).unwrap();
        // NaN outside the kept region is ignored.
        assert_eq!(weighted_mean(&[1.0, f64::NAN], &w, &half).unwrap(), 1.0);
        assert!(matches!(
            weighted_mean(&[f64::NAN, 2.0], &w, &half),
            Err(Error::NonFinite(_))
        ));
    }

    fn thresholds(cells: &[[f64; 4]]) -> QuantileThresholds {
        QuantileThresholds::from_cells(cells.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    #[test]
    fn arid_mask_uses_lowest_boundary_for_rpss() {
        let thr = thresholds(&[[0.0, 0.0, 1.0, 2.0], [10.0, 11.0, 12.0, 13.0]]);
        let mask = build_arid_mask(&[&thr], 1, 2, AridMetric::Rpss, DEFAULT_ARID_CUTOFF_MM).unwrap();
        assert_eq!(mask.keep(), &[false, true]);
    }

    #[test]
    fn arid_mask_intersects_over_dates() {
        // Cell 0 has q80 = 0.004 on the second of three dates; cell 1 is always wet.
        let wet = thresholds(&[[0.1, 0.2, 0.5, 1.0], [0.1, 0.2, 0.5, 1.0]]);
        let dry = thresholds(&[[0.0, 0.0, 0.001, 0.004], [0.1, 0.2, 0.5, 1.0]]);
        let mask =
            build_arid_mask(&[&wet, &dry, &wet], 1, 2, AridMetric::Bss, DEFAULT_ARID_CUTOFF_MM).unwrap();
        assert_eq!(mask.keep(), &[false, true]);
        // Cutoff comparison is inclusive.
        let edge = thresholds(&[[0.005, 0.005, 0.005, 0.005], [1.0, 1.0, 1.0, 1.0]]);
        let mask = build_arid_mask(&[&edge], 1, 2, AridMetric::Rpss, 0.005).unwrap();
        assert_eq!(mask.keep(), &[false, true]);
    }

    #[test]
    fn arid_mask_needs_thresholds() {
        assert!(build_arid_mask(&[], 1, 1, AridMetric::Rpss, 0.005).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_row_count(n_lat in 1usize..64) {
            let g = LatLonGrid::cell_centered(n_lat, 4).unwrap();
            let w = latitude_weights(&g).unwrap();
            let s: f64 = w.alpha().iter().sum();
            prop_assert!((s - n_lat as f64).abs() <= 1e-9 * n_lat as f64);
            prop_assert!(w.alpha().iter().all(|a| *a >= 0.0));
        }

        #[test]
        fn weighted_mean_ignores_weight_scale(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            alpha in proptest::collection::vec(0.1f64..3.0, 3),
            scale in 0.01f64..100.0,
        ) {
            let mask = SpatialMask::full(3, 4);
            let w1 = LatWeights::from_alpha(alpha.clone()).unwrap();
            let w2 = LatWeights::from_alpha(alpha.iter().map(|a| a * scale).collect()).unwrap();
            let a = weighted_mean(&vals, &w1, &mask).unwrap();
            let b = weighted_mean(&vals, &w2, &mask).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn full_mean_decomposes_over_complement(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            keep in proptest::collection::vec(any::<bool>(), 12),
        ) {
            prop_assume!(keep.iter().any(|k| *k) && keep.iter().any(|k| !*k));
            let g = LatLonGrid::cell_centered(3, 4).unwrap();
            let w = latitude_weights(&g).unwrap();
            let m = SpatialMask::from_keep(3, 4, keep).unwrap();
            let mc = m.complement();
            let wsum = |mask: &SpatialMask| -> f64 {
                let pc = w.per_cell(4);
                (0..12).filter(|c| mask.is_kept(*c)).map(|c| pc[c]).sum()
            };
            let (a, b) = (wsum(&m), wsum(&mc));
            let full = weighted_mean(&vals, &w, &SpatialMask::full(3, 4)).unwrap();
            let combined = (a * weighted_mean(&vals, &w, &m).unwrap()
                + b * weighted_mean(&vals, &w, &mc).unwrap()) / (a + b);
            prop_assert!((full - combined).abs() < 1e-9);
        }
    }
}
