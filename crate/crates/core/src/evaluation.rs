//! Verification metrics over initialization dates `s` and grid cells:
//! anomaly RMSE, anomaly correlation (ACC), temporal correlation (TCC), the
//! ranked probability skill score against the uniform climatological
//! forecast, the Brier skill score of the top bin, and a paired bootstrap over
//! dates.
//!
//! Forecast and observation collections are indexed `[s][cell]`; categorical
//! forecasts are stored bin-major per date (`[s][bin * cells + cell]`).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::climatology::{empirical_quantile, CategoryLabel};
use crate::error::{Error, Result};
use crate::grid::{weighted_mean, LatWeights, SpatialMask};
use crate::losses::rps_cell;
use crate::rng::stream;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.975;

/// `field - clim_mean`, elementwise.
pub fn anomaly(field: &[f64], clim_mean: &[f64]) -> Result<Vec<f64>> {
    if field.len() != clim_mean.len() {
        return Err(Error::ShapeMismatch(format!("{} values vs {} climatology", field.len(), clim_mean.len())));
    }
    Ok(field.iter().zip(clim_mean).map(|(f, c)| f - c).collect())
}

fn check_pairs<T, U>(a: &[Vec<T>], b: &[Vec<U>], cells: usize) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Empty("no initializations".into()));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} forecasts vs {} observations", a.len(), b.len())));
    }
    if a.iter().any(|f| f.len() != cells) || b.iter().any(|f| f.len() != cells) {
        return Err(Error::ShapeMismatch(format!("every field needs {cells} cells")));
    }
    Ok(())
}

fn cells_of(mask: &SpatialMask) -> usize {
    mask.n_lat() * mask.n_lon()
}

/// Square root of the weighted spatial mean of the per-cell mean (over
/// initializations) squared anomaly error.
pub fn armse(fc: &[Vec<f64>], obs: &[Vec<f64>], w: &LatWeights, mask: &SpatialMask) -> Result<f64> {
    let cells = cells_of(mask);
    check_pairs(fc, obs, cells)?;
    let n = fc.len() as f64;
    let mse: Vec<f64> = (0..cells)
        .map(|c| fc.iter().zip(obs).map(|(f, o)| (f[c] - o[c]) * (f[c] - o[c])).sum::<f64>() / n)
        .collect();
    Ok(libm::sqrt(weighted_mean(&mse, w, mask)?))
}

/// Weighted uncentered spatial correlation of one date.
pub fn acc_single(fc: &[f64], obs: &[f64], w: &LatWeights, mask: &SpatialMask) -> Result<f64> {
    let n_lon = mask.n_lon();
    if fc.len() != cells_of(mask) || obs.len() != fc.len() {
        return Err(Error::ShapeMismatch(format!("fields of {} and {} cells", fc.len(), obs.len())));
    }
    let (mut fo, mut ff, mut oo) = (0.0, 0.0, 0.0);
    for c in (0..cells_of(mask)).filter(|c| mask.is_kept(*c)) {
        let a = w.alpha()[c / n_lon];
        fo += a * fc[c] * obs[c];
        ff += a * fc[c] * fc[c];
        oo += a * obs[c] * obs[c];
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    if !(ff > 0.0 && oo > 0.0) {
        return Err(Error::ZeroNorm("anomaly field with zero weighted norm".into()));
    }
    Ok(fo / libm::sqrt(ff * oo))
}

/// Per-date spatial correlations, in date order.
pub fn acc_per_init(fc: &[Vec<f64>], obs: &[Vec<f64>], w: &LatWeights, mask: &SpatialMask) -> Result<Vec<f64>> {
    check_pairs(fc, obs, cells_of(mask))?;
    fc.iter().zip(obs).map(|(f, o)| acc_single(f, o, w, mask)).collect()
}

/// Unweighted mean over dates of [`acc_single`].
pub fn acc(fc: &[Vec<f64>], obs: &[Vec<f64>], w: &LatWeights, mask: &SpatialMask) -> Result<f64> {
    let per = acc_per_init(fc, obs, w, mask)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TccResult {
    pub value: f64,
    /// Kept cells dropped for zero temporal variance.
    pub excluded_cells: usize,
}

/// Per-cell uncentered correlation over dates, then weighted spatial mean.
pub fn tcc(fc: &[Vec<f64>], obs: &[Vec<f64>], w: &LatWeights, mask: &SpatialMask) -> Result<TccResult> {
    let cells = cells_of(mask);
    check_pairs(fc, obs, cells)?;
    if fc.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: fc.len() });
    }
    let mut values = alloc::vec![0.0; cells];
    let mut keep = mask.keep().to_vec();
    let mut excluded = 0;
    for c in 0..cells {
        if !keep[c] {
            continue;
        }
        let (mut fo, mut ff, mut oo) = (0.0, 0.0, 0.0);
        for (f, o) in fc.iter().zip(obs) {
            fo += f[c] * o[c];
            ff += f[c] * f[c];
            oo += o[c] * o[c];
        }
        if ff > 0.0 && oo > 0.0 {
            values[c] = fo / libm::sqrt(ff * oo);
        } else {
            keep[c] = false;
            excluded += 1;
        }
    }
    let valid = SpatialMask::from_keep(mask.n_lat(), mask.n_lon(), keep)?;
    Ok(TccResult { value: weighted_mean(&values, w, &valid)?, excluded_cells: excluded })
}

/// Skill of a model score relative to a reference score (lower is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillResult {
    pub model: f64,
    pub reference: f64,
    pub skill: f64,
    /// Weighted spatial mean scores per date, for bootstrapping.
    pub model_per_init: Vec<f64>,
    pub reference_per_init: Vec<f64>,
}

fn skill_from(model_per_init: Vec<f64>, reference_per_init: Vec<f64>) -> Result<SkillResult> {
    let n = model_per_init.len() as f64;
    let model = model_per_init.iter().sum::<f64>() / n;
    let reference = reference_per_init.iter().sum::<f64>() / n;
    if !(reference > 0.0) {
        return Err(Error::ZeroNorm("reference score is zero".into()));
    }
    Ok(SkillResult { model, reference, skill: 1.0 - model / reference, model_per_init, reference_per_init })
}

/// Per-cell RPS of a bin-major categorical field.
pub fn rps_field(probs: &[f64], labels: &[CategoryLabel], n_bins: usize) -> Result<Vec<f64>> {
    let cells = labels.len();
    if probs.len() != n_bins * cells {
        return Err(Error::ShapeMismatch(format!("{} probabilities for {cells} cells x {n_bins} bins", probs.len())));
    }
    let mut p = alloc::vec![0.0; n_bins];
    Ok((0..cells)
        .map(|c| {
            for (k, v) in p.iter_mut().enumerate() {
                *v = probs[k * cells + c];
            }
            rps_cell(&p, labels[c])
        })
        .collect())
}

/// Ranked probability skill score against the exact uniform forecast.
pub fn rpss(
    forecasts: &[Vec<f64>],
    labels: &[Vec<CategoryLabel>],
    n_bins: usize,
    w: &LatWeights,
    mask: &SpatialMask,
) -> Result<SkillResult> {
    let cells = cells_of(mask);
    if forecasts.is_empty() || forecasts.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} forecasts vs {} label fields", forecasts.len(), labels.len())));
    }
    let uniform = alloc::vec![1.0 / n_bins as f64; n_bins * cells];
    let mut model = Vec::with_capacity(forecasts.len());
    let mut reference = Vec::with_capacity(forecasts.len());
    for (f, l) in forecasts.iter().zip(labels) {
        if l.len() != cells {
            return Err(Error::ShapeMismatch(format!("label field of {} cells", l.len())));
        }
        if l.iter().any(|x| x.0 == 0 || x.index() >= n_bins) {
            return Err(Error::Validation(format!("labels must lie in 1..={n_bins}")));
        }
        model.push(weighted_mean(&rps_field(f, l, n_bins)?, w, mask)?);
        reference.push(weighted_mean(&rps_field(&uniform, l, n_bins)?, w, mask)?);
    }
    skill_from(model, reference)
}

/// Brier skill score of event probabilities against a constant reference
/// probability.
pub fn bss(
    event_probs: &[Vec<f64>],
    outcomes: &[Vec<bool>],
    reference_prob: f64,
    w: &LatWeights,
    mask: &SpatialMask,
) -> Result<SkillResult> {
    let cells = cells_of(mask);
    check_pairs(event_probs, outcomes, cells)?;
    let brier = |p: f64, o: bool| {
        let d = p - if o { 1.0 } else { 0.0 };
        d * d
    };
    let mut model = Vec::with_capacity(event_probs.len());
    let mut reference = Vec::with_capacity(event_probs.len());
    for (p, o) in event_probs.iter().zip(outcomes) {
        let m: Vec<f64> = p.iter().zip(o).map(|(p, o)| brier(*p, *o)).collect();
        let r: Vec<f64> = o.iter().map(|o| brier(reference_prob, *o)).collect();
        model.push(weighted_mean(&m, w, mask)?);
        reference.push(weighted_mean(&r, w, mask)?);
    }
    skill_from(model, reference)
}

/// Top-bin probability of each cell of a bin-major categorical field.
pub fn top_bin_probability(probs: &[f64], n_bins: usize) -> Vec<f64> {
    let cells = probs.len() / n_bins;
    probs[(n_bins - 1) * cells..].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootstrapStatistic {
    /// `mean(A) - mean(B)`.
    MeanDiff,
    /// `1 - mean(A) / mean(B)`.
    Skill,
}

impl BootstrapStatistic {
    fn eval(self, a: &[f64], b: &[f64], idx: impl Iterator<Item = usize> + Clone) -> f64 {
        let n = idx.clone().count() as f64;
        let ma = idx.clone().map(|i| a[i]).sum::<f64>() / n;
        let mb = idx.map(|i| b[i]).sum::<f64>() / n;
        match self {
            BootstrapStatistic::MeanDiff => ma - mb,
            BootstrapStatistic::Skill => 1.0 - ma / mb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub n_resamples: usize,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub significant: bool,
}

/// Paired bootstrap over dates: resample date indices with replacement,
/// recompute the statistic, take the two-sided percentile interval at
/// `level`, and flag significance when the interval excludes zero. The
/// interval is widened if needed to contain the point estimate.
pub fn bootstrap(
    a: &[f64],
    b: &[f64],
    statistic: BootstrapStatistic,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: a.len() });
    }
    if n_resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("{n_resamples} resamples at level {level}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bootstrap input".into()));
    }
    let n = a.len();
    if statistic == BootstrapStatistic::Skill && !(b.iter().sum::<f64>() > 0.0) {
        return Err(Error::ZeroNorm("reference scores sum to zero".into()));
    }
    let point = statistic.eval(a, b, 0..n);
    let mut rng = stream(seed, n as u64, n_resamples as u64);
    let mut stats = Vec::with_capacity(n_resamples);
    let mut idx = alloc::vec![0usize; n];
    for _ in 0..n_resamples {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..n);
        }
        let s = statistic.eval(a, b, idx.iter().copied());
        if s.is_finite() {
            stats.push(s);
        }
    }
    if stats.is_empty() {
        return Err(Error::NonFinite("every bootstrap resample".into()));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lower = empirical_quantile(&stats, tail).min(point);
    let upper = empirical_quantile(&stats, 1.0 - tail).max(point);
    let significant = lower > 0.0 || upper < 0.0;
    Ok(BootstrapResult { point, n_resamples, level, lower, upper, significant })
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub lead_week: u32,
    pub region: String,
    pub score: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub significant: bool,
    pub n_samples: usize,
}

/// Scores per (metric, lead week, region), each with an interval containing
/// the point estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,lead_week,region,score,ci_lower,ci_upper,significant,n_samples";

    /// Adds a row; the interval must contain the score.
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if !(row.ci_lower <= row.score && row.score <= row.ci_upper) {
            return Err(Error::Validation(format!(
                "{} interval [{}, {}] excludes {}",
                row.metric, row.ci_lower, row.ci_upper, row.score
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Row without an interval (the interval collapses to the score).
    pub fn push_point(&mut self, metric: &str, lead_week: u32, region: &str, score: f64, n: usize) -> Result<()> {
        self.push(MetricRow {
            metric: metric.into(),
            lead_week,
            region: region.into(),
            score,
            ci_lower: score,
            ci_upper: score,
            significant: false,
            n_samples: n,
        })
    }

    pub fn push_bootstrap(&mut self, metric: &str, lead_week: u32, region: &str, b: &BootstrapResult, n: usize) -> Result<()> {
        self.push(MetricRow {
            metric: metric.into(),
            lead_week,
            region: region.into(),
            score: b.point,
            ci_lower: b.lower,
            ci_upper: b.upper,
            significant: b.significant,
            n_samples: n,
        })
    }

    pub fn find(&self, metric: &str, lead_week: u32, region: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric && r.lead_week == lead_week && r.region == region)
    }

    /// Delimited text with the fixed [`Self::CSV_HEADER`] columns; floats use
    /// the shortest round-trip representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.metric, r.lead_week, r.region, r.score, r.ci_lower, r.ci_upper, r.significant, r.n_samples
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{latitude_weights, LatLonGrid};
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn eq_weights(n_lat: usize) -> LatWeights {
        LatWeights::uniform(n_lat)
    }

    fn label(k: u8) -> CategoryLabel {
        CategoryLabel(k)
    }

    #[test]
    fn anomaly_examples() {
        let clim = [1.0, 2.0];
        assert_eq!(anomaly(&clim, &clim).unwrap(), [0.0, 0.0]);
        assert_eq!(anomaly(&[3.0, 1.5], &clim).unwrap(), [2.0, -0.5]);
        assert_eq!(anomaly(&[13.0, 11.5], &[11.0, 12.0]).unwrap(), [2.0, -0.5]);
        assert!(anomaly(&[1.0], &clim).is_err());
    }

    #[test]
    fn armse_examples_and_operation_order() {
        let m = SpatialMask::full(1, 1);
        let w = eq_weights(1);
        assert_eq!(armse(&[vec![1.0]], &[vec![1.0]], &w, &m).unwrap(), 0.0);
        let m2 = SpatialMask::full(2, 2);
        let f = vec![vec![1.5; 4]];
        let o = vec![vec![-0.5; 4]];
        assert!((armse(&f, &o, &eq_weights(2), &m2).unwrap() - 2.0).abs() < 1e-15);
        // Errors 0 and 2 at one cell: sqrt(mean(0, 4)) = sqrt(2), not mean(|e|) = 1.
        let v = armse(&[vec![0.0], vec![2.0]], &[vec![0.0], vec![0.0]], &w, &m).unwrap();
        assert!((v - libm::sqrt(2.0)).abs() < 1e-15);
        assert!((v - 1.0).abs() > 0.4);
    }

    #[test]
    fn acc_examples() {
        let m = SpatialMask::full(2, 2);
        let w = latitude_weights(&LatLonGrid::new(vec![30.0, -20.0], 0.0, 90.0, 2).unwrap()).unwrap();
        let x = vec![vec![0.5, -1.0, 2.0, 0.3]];
        let neg: Vec<Vec<f64>> = x.iter().map(|f| f.iter().map(|v| -v).collect()).collect();
        let dbl: Vec<Vec<f64>> = x.iter().map(|f| f.iter().map(|v| 2.0 * v).collect()).collect();
        assert!((acc(&x, &x, &w, &m).unwrap() - 1.0).abs() < 1e-15);
        assert!((acc(&neg, &x, &w, &m).unwrap() + 1.0).abs() < 1e-15);
        assert!((acc(&dbl, &x, &w, &m).unwrap() - 1.0).abs() < 1e-15);
        let zero = vec![vec![0.0; 4]];
        assert!(matches!(acc(&zero, &x, &w, &m), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn tcc_examples() {
        let w = LatWeights::from_alpha(vec![4.0 / 3.0, 2.0 / 3.0]).unwrap();
        let m = SpatialMask::full(2, 1);
        // Cell 0 perfectly correlated; cell 1 has uncentered correlation 0.5.
        let obs = vec![vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0]];
        let c1 = [1.0, libm::sqrt(3.0), -0.0];
        let fc: Vec<Vec<f64>> = obs.iter().enumerate().map(|(s, o)| vec![o[0], c1[s]]).collect();
        // Cell 1: obs (1, 0, 0), fc (1, sqrt3, 0) -> 1 / (1 * 2) = 0.5.
        let r = tcc(&fc, &obs, &w, &m).unwrap();
        assert!((r.value - (4.0 / 3.0 * 1.0 + 2.0 / 3.0 * 0.5) / 2.0).abs() < 1e-12);
        assert!((r.value - 0.8333333333333334).abs() < 1e-12);
        let o1 = vec![vec![1.0, 1.0], vec![2.0, 0.5], vec![0.3, 0.2]];
        let n1: Vec<Vec<f64>> = o1.iter().map(|f| f.iter().map(|v| -v).collect()).collect();
        assert!((tcc(&o1, &o1, &w, &m).unwrap().value - 1.0).abs() < 1e-15);
        assert!((tcc(&n1, &o1, &w, &m).unwrap().value + 1.0).abs() < 1e-15);
        // A kept cell with zero variance is excluded and counted.
        let flat = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let r = tcc(&flat, &flat, &w, &m).unwrap();
        assert_eq!(r.excluded_cells, 1);
        assert!((r.value - 1.0).abs() < 1e-15);
        assert!(tcc(&flat[..1], &flat[..1], &w, &m).is_err());
    }

    fn one_hot_probs(labels: &[CategoryLabel], k: usize) -> Vec<f64> {
        let cells = labels.len();
        let mut p = vec![0.0; k * cells];
        for (c, l) in labels.iter().enumerate() {
            p[l.index() * cells + c] = 1.0;
        }
        p
    }

    #[test]
    fn rpss_identities() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let w = latitude_weights(&LatLonGrid::cell_centered(3, 4).unwrap()).unwrap();
        let m = SpatialMask::full(3, 4);
        let labels: Vec<Vec<CategoryLabel>> =
            (0..6).map(|_| (0..12).map(|_| label(r.random_range(1..=5u8))).collect()).collect();
        let uniform = vec![vec![0.2; 60]; 6];
        assert_eq!(rpss(&uniform, &labels, 5, &w, &m).unwrap().skill, 0.0);
        let perfect: Vec<Vec<f64>> = labels.iter().map(|l| one_hot_probs(l, 5)).collect();
        assert_eq!(rpss(&perfect, &labels, 5, &w, &m).unwrap().skill, 1.0);

        let single = rpss(&[vec![0.2; 5]], &[vec![label(3)]], 5, &eq_weights(1), &SpatialMask::full(1, 1)).unwrap();
        assert!((single.model - 0.40).abs() < 1e-15);
        assert!((single.reference - 0.40).abs() < 1e-15);
        assert_eq!(single.skill, 0.0);
    }

    #[test]
    fn bss_identities_and_reference_score() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let w = eq_weights(10);
        let m = SpatialMask::full(10, 100);
        let outcomes: Vec<Vec<bool>> = (0..10).map(|_| (0..1000).map(|_| r.random::<f64>() < 0.2).collect()).collect();
        let constant = vec![vec![0.2; 1000]; 10];
        let s = bss(&constant, &outcomes, 0.2, &w, &m).unwrap();
        assert_eq!(s.skill, 0.0);
        assert!((s.reference - 0.16).abs() < 0.01);
        let perfect: Vec<Vec<f64>> = outcomes.iter().map(|o| o.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()).collect();
        assert_eq!(bss(&perfect, &outcomes, 0.2, &w, &m).unwrap().skill, 1.0);
        assert_eq!(top_bin_probability(&[0.1, 0.2, 0.7, 0.3, 0.4, 0.3], 2), [0.3, 0.4, 0.3]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = SpatialMask::from_keep(1, 2, vec![false, false]).unwrap();
        let w = eq_weights(1);
        assert_eq!(armse(&[vec![1.0, 2.0]], &[vec![0.0, 0.0]], &w, &m), Err(Error::EmptyMask));
        assert!(rpss(&[vec![0.2; 10]], &[vec![label(1); 2]], 5, &w, &m).is_err());
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let a = [0.3, 0.1, 0.7, 0.2];
        let r = bootstrap(&a, &a, BootstrapStatistic::MeanDiff, 1000, 0.975, 1).unwrap();
        assert_eq!((r.lower, r.point, r.upper, r.significant), (0.0, 0.0, 0.0, false));
        let b: Vec<f64> = a.iter().map(|v| v - 0.25).collect();
        let r = bootstrap(&a, &b, BootstrapStatistic::MeanDiff, 1000, 0.975, 1).unwrap();
        assert!((r.lower - 0.25).abs() < 1e-12 && (r.upper - 0.25).abs() < 1e-12);
        assert!(r.significant);
        assert!(bootstrap(&a[..1], &a[..1], BootstrapStatistic::MeanDiff, 10, 0.975, 1).is_err());
        let again = bootstrap(&a, &b, BootstrapStatistic::Skill, 200, 0.975, 4).unwrap();
        assert_eq!(again, bootstrap(&a, &b, BootstrapStatistic::Skill, 200, 0.975, 4).unwrap());
    }

    #[test]
    fn bootstrap_coverage() {
        let mut covered = 0;
        for trial in 0..100u64 {
            let mut r = ChaCha8Rng::seed_from_u64(1000 + trial);
            let d: Vec<f64> = (0..100)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    1.0 + z
                })
                .collect();
            let zeros = vec![0.0; 100];
            let b = bootstrap(&d, &zeros, BootstrapStatistic::MeanDiff, 1000, 0.975, trial).unwrap();
            if b.lower <= 1.0 && 1.0 <= b.upper {
                covered += 1;
            }
        }
        assert!(covered >= 92, "covered {covered}/100");
    }

    #[test]
    fn report_rows() {
        let mut rep = MetricReport::default();
        rep.push_point("acc", 2, "global", 0.5, 104).unwrap();
        let bad = MetricRow {
            metric: "rpss".into(),
            lead_week: 2,
            region: "land".into(),
            score: 0.3,
            ci_lower: 0.4,
            ci_upper: 0.5,
            significant: true,
            n_samples: 3,
        };
        assert!(rep.push(bad).is_err());
        assert_eq!(rep.to_csv(), "metric,lead_week,region,score,ci_lower,ci_upper,significant,n_samples\nacc,2,global,0.5,0.5,0.5,false,104\n");
        assert!(rep.find("acc", 2, "global").is_some());
    }

    proptest! {
        #[test]
        fn skills_never_exceed_one(raw in proptest::collection::vec(0.01f64..1.0, 20), labels in proptest::collection::vec(1u8..=5, 4)) {
            let w = eq_weights(2);
            let m = SpatialMask::full(2, 2);
            let mut p = vec![0.0; 20];
            for c in 0..4 {
                let s: f64 = (0..5).map(|k| raw[k * 4 + c]).sum();
                for k in 0..5 {
                    p[k * 4 + c] = raw[k * 4 + c] / s;
                }
            }
            let l: Vec<CategoryLabel> = labels.iter().map(|k| label(*k)).collect();
            let r = rpss(&[p.clone()], &[l.clone()], 5, &w, &m).unwrap();
            prop_assert!(r.skill <= 1.0);
            let outcomes: Vec<bool> = l.iter().map(|x| x.0 == 5).collect();
            let b = bss(&[top_bin_probability(&p, 5)], &[outcomes], 0.2, &w, &m).unwrap();
            prop_assert!(b.skill <= 1.0);
        }

        #[test]
        fn acc_is_scale_invariant(v in proptest::collection::vec(-5.0f64..5.0, 6), o in proptest::collection::vec(-5.0f64..5.0, 6), s in 0.01f64..100.0) {
            let w = LatWeights::from_alpha(vec![0.5, 1.5]).unwrap();
            let m = SpatialMask::full(2, 3);
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            if let (Ok(a), Ok(b)) = (acc_single(&v, &o, &w, &m), acc_single(&scaled, &o, &w, &m)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
