//! Reforecast-based calibration baseline: model-specific thresholds from a
//! reforecast archive, member-counting probabilities, and the q80 mismatch
//! diagnostic between model and observed thresholds.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use chrono::NaiveDate;

use crate::calendar::sample_dates;
use crate::climatology::{discretize, quantile_thresholds, ClimSampleSet, QuantileThresholds};
use crate::error::{Error, Result};
use crate::grid::{LatLonGrid, SpatialMask};

/// Ensemble members for one (init date, lead); every member is a full field.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub init: NaiveDate,
    pub lead: u32,
    pub members: Vec<Vec<f64>>,
}

impl EnsembleForecast {
    pub fn new(init: NaiveDate, lead: u32, members: Vec<Vec<f64>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("ensemble needs at least one member".into()));
        }
        let n = members[0].len();
        if members.iter().any(|m| m.len() != n) {
            return Err(Error::ShapeMismatch("ensemble members on different grids".into()));
        }
        Ok(Self { init, lead, members })
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn n_cells(&self) -> usize {
        self.members[0].len()
    }
}

/// Source of historical (re)forecast members keyed by initialization date and lead.
pub trait ReforecastArchive {
    fn members(&self, init: NaiveDate, lead: u32) -> Result<Vec<Vec<f64>>>;
}

/// Reforecast archive held in memory.
#[derive(Debug, Clone, Default)]
pub struct StoredReforecast {
    entries: BTreeMap<(NaiveDate, u32), Vec<Vec<f64>>>,
}

impl StoredReforecast {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, init: NaiveDate, lead: u32, members: Vec<Vec<f64>>) -> Result<()> {
        if self.entries.insert((init, lead), members).is_some() {
            return Err(Error::Validation(format!("duplicate reforecast {init} lead {lead}")));
        }
        Ok(())
    }
}

impl ReforecastArchive for StoredReforecast {
    fn members(&self, init: NaiveDate, lead: u32) -> Result<Vec<Vec<f64>>> {
        self.entries
            .get(&(init, lead))
            .cloned()
            .ok_or_else(|| Error::MissingData(format!("reforecast init {init} lead {lead} (coverage gap)")))
    }
}

/// Pools every member of every (year, offset) reforecast into one sample set
/// per cell and applies the climatological quantile estimator to it.
pub fn model_thresholds(
    archive: &dyn ReforecastArchive,
    init: NaiveDate,
    lead: u32,
    years: &[i32],
    offsets: &[i64],
    n_bins: usize,
) -> Result<QuantileThresholds> {
    let pooled = pooled_samples(archive, init, lead, years, offsets)?;
    quantile_thresholds(&pooled, n_bins)
}

pub fn pooled_samples(
    archive: &dyn ReforecastArchive,
    init: NaiveDate,
    lead: u32,
    years: &[i32],
    offsets: &[i64],
) -> Result<ClimSampleSet> {
    let mut fields = Vec::new();
    for date in sample_dates(init, years, offsets) {
        fields.extend(archive.members(date, lead)?);
    }
    let refs: Vec<&[f64]> = fields.iter().map(|f| f.as_slice()).collect();
    ClimSampleSet::from_fields(&refs)
}

/// Categorical probabilities from member counts. Stored bin-major `[K, cells]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberCounts {
    pub n_members: usize,
    pub n_bins: usize,
    pub counts: Vec<u32>,
}

impl MemberCounts {
    pub fn n_cells(&self) -> usize {
        self.counts.len() / self.n_bins
    }

    pub fn count(&self, bin: usize, cell: usize) -> u32 {
        self.counts[bin * self.n_cells() + cell]
    }

    /// `count / M` per bin, bin-major.
    pub fn probabilities(&self) -> Vec<f64> {
        let m = self.n_members as f64;
        self.counts.iter().map(|c| *c as f64 / m).collect()
    }
}

pub fn ensemble_to_probabilities(ens: &EnsembleForecast, thr: &QuantileThresholds) -> Result<MemberCounts> {
    if ens.n_cells() != thr.n_cells() {
        return Err(Error::ShapeMismatch(format!(
            "ensemble has {} cells, thresholds {}",
            ens.n_cells(),
            thr.n_cells()
        )));
    }
    let n_bins = thr.n_bins();
    let n_cells = ens.n_cells();
    let mut counts = alloc::vec![0u32; n_bins * n_cells];
    for member in &ens.members {
        for (cell, v) in member.iter().enumerate() {
            let bin = discretize(*v, thr.cell(cell))?.index();
            counts[bin * n_cells + cell] += 1;
        }
    }
    Ok(MemberCounts { n_members: ens.n_members(), n_bins, counts })
}

/// One paired (observed, model) q80 sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchRow {
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    pub obs_q80: f64,
    pub model_q80: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MismatchTable {
    pub rows: Vec<MismatchRow>,
    /// Fraction of rows with `model_q80 < obs_q80`.
    pub below_fraction: f64,
    /// Rows with `model_q80 == obs_q80`.
    pub ties: usize,
}

/// Compares the top boundary of model and observed thresholds over kept cells
/// and matching dates.
pub fn q80_mismatch_table(
    model: &[(NaiveDate, QuantileThresholds)],
    observed: &[(NaiveDate, QuantileThresholds)],
    grid: &LatLonGrid,
    mask: &SpatialMask,
) -> Result<MismatchTable> {
    let obs: BTreeMap<NaiveDate, &QuantileThresholds> = observed.iter().map(|(d, t)| (*d, t)).collect();
    let n_lon = grid.n_lon();
    let mut rows = Vec::new();
    for (date, mt) in model {
        let Some(ot) = obs.get(date) else { continue };
        if mt.n_cells() != grid.n_cells() || ot.n_cells() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!("thresholds on {date} do not match the grid")));
        }
        for cell in (0..grid.n_cells()).filter(|c| mask.is_kept(*c)) {
            let m = mt.cell(cell);
            let o = ot.cell(cell);
            rows.push(MismatchRow {
                lat: grid.latitudes()[cell / n_lon],
                lon: grid.longitude(cell % n_lon),
                date: *date,
                obs_q80: o[o.len() - 1],
                model_q80: m[m.len() - 1],
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("no common kept cells and dates".into()));
    }
    let below = rows.iter().filter(|r| r.model_q80 < r.obs_q80).count();
    let ties = rows.iter().filter(|r| r.model_q80 == r.obs_q80).count();
    Ok(MismatchTable { below_fraction: below as f64 / rows.len() as f64, ties, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::{add_days, year_list, CLIMATOLOGY_OFFSETS};
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    /// Archive where the member field at any init date is a deterministic
    /// function of (date, member), scaled by `scale`.
    struct Synthetic {
        members: usize,
        scale: f64,
    }

    impl ReforecastArchive for Synthetic {
        fn members(&self, init: NaiveDate, lead: u32) -> Result<Vec<Vec<f64>>> {
            let seed = crate::calendar::days_between(date(2000, 1, 1), init) as u64 * 31 + lead as u64;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Ok((0..self.members)
                .map(|_| (0..3).map(|_| self.scale * rng.random_range(0.0..10.0)).collect())
                .collect())
        }
    }

    #[test]
    fn pooled_sample_count() {
        let archive = Synthetic { members: 11, scale: 1.0 };
        let s = pooled_samples(&archive, date(2022, 3, 3), 14, &year_list(2002, 2021), &CLIMATOLOGY_OFFSETS)
            .unwrap();
        assert_eq!(s.n_samples(), 1100);
    }

    #[test]
    fn scaled_archive_scales_thresholds() {
        let years = year_list(2002, 2021);
        let obs = Synthetic { members: 1, scale: 1.0 };
        let model = Synthetic { members: 1, scale: 0.7 };
        let init = date(2022, 5, 5);
        let to = model_thresholds(&obs, init, 7, &years, &CLIMATOLOGY_OFFSETS, 5).unwrap();
        let tm = model_thresholds(&model, init, 7, &years, &CLIMATOLOGY_OFFSETS, 5).unwrap();
        for c in 0..3 {
            for k in 0..4 {
                assert!((tm.cell(c)[k] - 0.7 * to.cell(c)[k]).abs() < 1e-12);
            }
        }
        // Identical archives give identical thresholds.
        let again = model_thresholds(&obs, init, 7, &years, &CLIMATOLOGY_OFFSETS, 5).unwrap();
        assert_eq!(to, again);
    }

    #[test]
    fn coverage_gap_is_reported() {
        let mut a = StoredReforecast::new();
        a.insert(date(2010, 1, 1), 7, vec![vec![1.0]]).unwrap();
        let err = model_thresholds(&a, date(2022, 1, 1), 7, &[2010, 2011], &[0], 5).unwrap_err();
        assert!(matches!(err, Error::MissingData(m) if m.contains("2011-01-01")));
    }

    fn thr(bounds: &[f64]) -> QuantileThresholds {
        QuantileThresholds::from_cells(vec![bounds.to_vec()]).unwrap()
    }

    #[test]
    fn counting_examples() {
        let t = thr(&[2.0, 4.0, 6.0, 8.0]);
        let one = EnsembleForecast::new(date(2022, 1, 3), 14, vec![vec![5.0]]).unwrap();
        assert_eq!(ensemble_to_probabilities(&one, &t).unwrap().probabilities(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        // Members in bins (1, 1, 3, 5, 5).
        let five = EnsembleForecast::new(date(2022, 1, 3), 14, vec![vec![0.0], vec![1.0], vec![5.0], vec![9.0], vec![10.0]])
            .unwrap();
        assert_eq!(ensemble_to_probabilities(&five, &t).unwrap().probabilities(), vec![0.4, 0.0, 0.2, 0.0, 0.4]);
        let same = EnsembleForecast::new(date(2022, 1, 3), 14, vec![vec![7.0]; 9]).unwrap();
        assert_eq!(ensemble_to_probabilities(&same, &t).unwrap().probabilities(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        let wrong = EnsembleForecast::new(date(2022, 1, 3), 14, vec![vec![1.0, 2.0]]).unwrap();
        assert!(ensemble_to_probabilities(&wrong, &t).is_err());
    }

    #[test]
    fn counts_sum_to_members_and_are_rank_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = rng.random_range(1..20);
            let members: Vec<Vec<f64>> = (0..m).map(|_| (0..4).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
            let samples: Vec<Vec<f64>> = (0..4).map(|_| (0..30).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
            let t = quantile_thresholds(&ClimSampleSet::from_cell_samples(samples.clone()).unwrap(), 5).unwrap();
            let ens = EnsembleForecast::new(date(2022, 1, 3), 7, members.clone()).unwrap();
            let p = ensemble_to_probabilities(&ens, &t).unwrap();
            for cell in 0..4 {
                let total: u32 = (0..5).map(|b| p.count(b, cell)).sum();
                assert_eq!(total as usize, m);
            }
            // With 21 samples every quintile falls exactly on an order statistic, so
            // thresholds move with any strictly increasing transform.
            let tr = |v: &f64| libm::exp(*v);
            let samples21: Vec<Vec<f64>> = samples.iter().map(|c| c[..21].to_vec()).collect();
            let t21 = quantile_thresholds(&ClimSampleSet::from_cell_samples(samples21.clone()).unwrap(), 5).unwrap();
            let p21 = ensemble_to_probabilities(&ens, &t21).unwrap();
            let samples_t: Vec<Vec<f64>> = samples21.iter().map(|c| c.iter().map(tr).collect()).collect();
            let members_t: Vec<Vec<f64>> = members.iter().map(|c| c.iter().map(tr).collect()).collect();
            let tt = quantile_thresholds(&ClimSampleSet::from_cell_samples(samples_t).unwrap(), 5).unwrap();
            let pt = ensemble_to_probabilities(&EnsembleForecast::new(date(2022, 1, 3), 7, members_t).unwrap(), &tt)
                .unwrap();
            assert_eq!(p21, pt);
        }
    }

    #[test]
    fn calibrated_frequencies_are_uniform() {
        // Forecasts drawn from the reforecast distribution land in each model bin
        // with frequency near 1/K.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<f64> = (0..1100).map(|_| libm::exp(rng.random_range(-1.0..1.5))).collect();
        let t = quantile_thresholds(&ClimSampleSet::from_cell_samples(vec![samples]).unwrap(), 5).unwrap();
        let mut counts = [0usize; 5];
        let draws = 4000;
        for _ in 0..draws {
            let v = libm::exp(rng.random_range(-1.0..1.5));
            counts[discretize(v, t.cell(0)).unwrap().index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.2).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn mismatch_fractions() {
        let grid = LatLonGrid::cell_centered(2, 2).unwrap();
        let mask = SpatialMask::full(2, 2);
        let d0 = date(2022, 1, 3);
        let obs = QuantileThresholds::from_cells(
            (1..=4).map(|c| vec![0.1 * c as f64, 0.2 * c as f64, 0.3 * c as f64, 0.4 * c as f64]).collect(),
        )
        .unwrap();
        let same = q80_mismatch_table(&[(d0, obs.clone())], &[(d0, obs.clone())], &grid, &mask).unwrap();
        assert_eq!(same.below_fraction, 0.0);
        assert_eq!(same.ties, 4);
        let low = obs.map(|v| 0.7 * v).unwrap();
        let t = q80_mismatch_table(&[(d0, low)], &[(d0, obs.clone())], &grid, &mask).unwrap();
        assert_eq!(t.below_fraction, 1.0);
        assert_eq!(t.rows.len(), 4);
        let other = add_days(d0, 1);
        assert!(q80_mismatch_table(&[(other, obs.clone())], &[(d0, obs)], &grid, &mask).is_err());
    }
}
