//! Climatological quantile thresholds, ordinal category labels and the uniform
//! climatological reference forecast.
//!
//! Two conventions are fixed here because downstream oracles depend on them:
//!
//! * quantiles use linear interpolation between order statistics at the
//!   1-based rank `1 + p (n - 1)`;
//! * bins are right-closed: a value equal to a boundary falls in the lower bin.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use chrono::{Datelike, NaiveDate};

use crate::calendar::{same_calendar_day, sample_dates};
use crate::error::{Error, Result};
use crate::field::DailySeries;

pub const WEEK: usize = 7;
pub const MIN_SAMPLES: usize = 5;

/// Trailing 7-day means. Output index `i` is the mean over input days
/// `[i, i + 6]`, i.e. it belongs to input day `i + 6`.
pub fn rolling_weekly_mean(series: &[f64]) -> Result<Vec<f64>> {
    if series.len() < WEEK {
        return Err(Error::TooShort { needed: WEEK, got: series.len() });
    }
    Ok(series.windows(WEEK).map(|w| w.iter().sum::<f64>() / WEEK as f64).collect())
}

/// Applies [`rolling_weekly_mean`] per cell to a daily series. The result
/// starts six days after the input.
pub fn rolling_weekly_series(daily: &DailySeries) -> Result<DailySeries> {
    if daily.len() < WEEK {
        return Err(Error::TooShort { needed: WEEK, got: daily.len() });
    }
    let width = daily.width();
    let days = (WEEK - 1..daily.len())
        .map(|end| {
            let mut acc = alloc::vec![0.0; width];
            for d in end + 1 - WEEK..=end {
                for (a, v) in acc.iter_mut().zip(daily.day(d)) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= WEEK as f64);
            acc
        })
        .collect();
    DailySeries::new(crate::calendar::add_days(daily.start(), WEEK as i64 - 1), width, days)
}

/// Per-cell climatological samples, stored cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimSampleSet {
    n_cells: usize,
    n_samples: usize,
    values: Vec<f64>,
}

impl ClimSampleSet {
    /// Builds a sample set from one field per sample.
    pub fn from_fields(fields: &[&[f64]]) -> Result<Self> {
        let n_samples = fields.len();
        let n_cells = fields.first().map_or(0, |f| f.len());
        if fields.iter().any(|f| f.len() != n_cells) {
            return Err(Error::ShapeMismatch("sample fields differ in size".into()));
        }
        let mut values = alloc::vec![0.0; n_cells * n_samples];
        for (s, f) in fields.iter().enumerate() {
            for (c, v) in f.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("climatological sample {s}, cell {c}")));
                }
                values[c * n_samples + s] = *v;
            }
        }
        Ok(Self { n_cells, n_samples, values })
    }

    pub fn from_cell_samples(cells: Vec<Vec<f64>>) -> Result<Self> {
        let n_samples = cells.first().map_or(0, |c| c.len());
        if cells.iter().any(|c| c.len() != n_samples) {
            return Err(Error::ShapeMismatch("cells have unequal sample counts".into()));
        }
        if cells.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("climatological samples".into()));
        }
        Ok(Self { n_cells: cells.len(), n_samples, values: cells.concat() })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.n_cells)
            .map(|c| self.cell(c).iter().sum::<f64>() / self.n_samples as f64)
            .collect()
    }
}

/// Gathers one sample per (year, offset) for `target` from a series of
/// (already weekly-averaged) values. Offsets wrap across calendar years.
pub fn collect_samples(
    series: &DailySeries,
    target: NaiveDate,
    years: &[i32],
    offsets: &[i64],
) -> Result<ClimSampleSet> {
    let dates = sample_dates(target, years, offsets);
    let fields = dates
        .iter()
        .map(|d| series.require(*d, "climatology sample"))
        .collect::<Result<Vec<_>>>()?;
    ClimSampleSet::from_fields(&fields)
}

/// Empirical quantile of sorted data: linear interpolation at rank `1 + p (n-1)`.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = p * (sorted.len() - 1) as f64;
    let lo = libm::floor(h) as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let (a, b) = (sorted[lo], sorted[lo + 1]);
    (a + (h - lo as f64) * (b - a)).clamp(a, b)
}

/// [`empirical_quantile`] at `p = k / n_bins`, with the interpolation rank
/// computed in integers so that boundaries landing on order statistics are exact.
pub fn bin_boundary(sorted: &[f64], k: usize, n_bins: usize) -> f64 {
    debug_assert!(!sorted.is_empty() && n_bins > 0 && k <= n_bins);
    let num = k * (sorted.len() - 1);
    let lo = num / n_bins;
    let rem = num % n_bins;
    if rem == 0 {
        return sorted[lo];
    }
    let (a, b) = (sorted[lo], sorted[lo + 1]);
    (a + (rem as f64 / n_bins as f64) * (b - a)).clamp(a, b)
}

/// Per-cell category boundaries (`K - 1` per cell, nondecreasing).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileThresholds {
    n_bounds: usize,
    values: Vec<f64>,
}

impl QuantileThresholds {
    /// One boundary list per cell.
    pub fn from_cells(cells: Vec<Vec<f64>>) -> Result<Self> {
        let n_bounds = cells.first().map_or(0, |c| c.len());
        if n_bounds == 0 || cells.iter().any(|c| c.len() != n_bounds) {
            return Err(Error::ShapeMismatch("every cell needs the same non-zero boundary count".into()));
        }
        let t = Self { n_bounds, values: cells.concat() };
        t.check_monotone()?;
        Ok(t)
    }

    /// One field per boundary (q20 field, q40 field, ...).
    pub fn from_boundary_fields(fields: &[Vec<f64>]) -> Result<Self> {
        let n_cells = fields.first().map_or(0, |f| f.len());
        if fields.iter().any(|f| f.len() != n_cells) {
            return Err(Error::ShapeMismatch("boundary fields differ in size".into()));
        }
        let cells = (0..n_cells).map(|c| fields.iter().map(|f| f[c]).collect()).collect();
        Self::from_cells(cells)
    }

    pub fn n_bounds(&self) -> usize {
        self.n_bounds
    }

    pub fn n_bins(&self) -> usize {
        self.n_bounds + 1
    }

    pub fn n_cells(&self) -> usize {
        self.values.len() / self.n_bounds
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_bounds..(c + 1) * self.n_bounds]
    }

    /// Field of boundary `b` (0-based) over all cells.
    pub fn boundary(&self, b: usize) -> Vec<f64> {
        (0..self.n_cells()).map(|c| self.cell(c)[b]).collect()
    }

    pub fn boundary_fields(&self) -> Vec<Vec<f64>> {
        (0..self.n_bounds).map(|b| self.boundary(b)).collect()
    }

    /// Applies `f` to every boundary (used for affine/monotone transforms).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let t = Self { n_bounds: self.n_bounds, values: self.values.iter().map(|v| f(*v)).collect() };
        t.check_monotone()?;
        Ok(t)
    }

    fn check_monotone(&self) -> Result<()> {
        for c in 0..self.n_cells() {
            let b = self.cell(c);
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("threshold at cell {c}")));
            }
            if b.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::NonMonotone(format!("cell {c}")));
            }
        }
        Ok(())
    }
}

/// Equiprobable category boundaries at `p = k / n_bins`, `k = 1..n_bins-1`.
/// Quintiles (q20..q80) for `n_bins = 5`.
pub fn quantile_thresholds(samples: &ClimSampleSet, n_bins: usize) -> Result<QuantileThresholds> {
    if n_bins < 2 {
        return Err(Error::Validation(format!("need at least 2 bins, got {n_bins}")));
    }
    if samples.n_samples() < MIN_SAMPLES {
        return Err(Error::TooFewSamples { needed: MIN_SAMPLES, got: samples.n_samples() });
    }
    let mut sorted = Vec::with_capacity(samples.n_samples());
    let mut values = Vec::with_capacity(samples.n_cells() * (n_bins - 1));
    for c in 0..samples.n_cells() {
        sorted.clear();
        sorted.extend_from_slice(samples.cell(c));
        sorted.sort_by(f64::total_cmp);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..n_bins {
            let q = bin_boundary(&sorted, k, n_bins).max(prev);
            values.push(q);
            prev = q;
        }
    }
    Ok(QuantileThresholds { n_bounds: n_bins - 1, values })
}

/// Quintile boundaries (q20, q40, q60, q80).
pub fn quintile_thresholds(samples: &ClimSampleSet) -> Result<QuantileThresholds> {
    quantile_thresholds(samples, 5)
}

/// Thresholds and climatological means for every calendar day, keyed by
/// (month, day) with Feb 29 folded onto Feb 28.
#[derive(Debug, Clone, PartialEq)]
pub struct CalendarClimatology {
    n_bins: usize,
    entries: BTreeMap<(u32, u32), (QuantileThresholds, Vec<f64>)>,
}

fn calendar_key(date: NaiveDate) -> (u32, u32) {
    let d = same_calendar_day(date, 2001);
    (d.month(), d.day())
}

impl CalendarClimatology {
    /// Builds the 365 calendar-day climatologies from a weekly-mean series.
    pub fn build(weekly: &DailySeries, years: &[i32], offsets: &[i64], n_bins: usize) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let first = NaiveDate::from_ymd_opt(2001, 1, 1).expect("valid date");
        for day in first.iter_days().take(365) {
            let samples = collect_samples(weekly, day, years, offsets)?;
            let thr = quantile_thresholds(&samples, n_bins)?;
            entries.insert((day.month(), day.day()), (thr, samples.mean()));
        }
        Ok(Self { n_bins, entries })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn thresholds(&self, date: NaiveDate) -> &QuantileThresholds {
        &self.entries[&calendar_key(date)].0
    }

    pub fn mean(&self, date: NaiveDate) -> &[f64] {
        &self.entries[&calendar_key(date)].1
    }

    /// Every calendar day's thresholds, in calendar order.
    pub fn all_thresholds(&self) -> impl Iterator<Item = &QuantileThresholds> {
        self.entries.values().map(|e| &e.0)
    }
}

/// Ordinal bin index, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CategoryLabel(pub u8);

impl CategoryLabel {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

/// Smallest `k` with `value <= bounds[k-1]`, otherwise the top bin.
pub fn discretize(value: f64, bounds: &[f64]) -> Result<CategoryLabel> {
    if !value.is_finite() {
        return Err(Error::NonFinite("value to discretize".into()));
    }
    if bounds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::NonMonotone(format!("{bounds:?}")));
    }
    let k = bounds.iter().position(|b| value <= *b).unwrap_or(bounds.len());
    Ok(CategoryLabel(k as u8 + 1))
}

/// Labels every cell of a field against per-cell thresholds.
pub fn discretize_field(values: &[f64], thr: &QuantileThresholds) -> Result<Vec<CategoryLabel>> {
    if values.len() != thr.n_cells() {
        return Err(Error::ShapeMismatch(format!(
            "{} values vs {} threshold cells",
            values.len(),
            thr.n_cells()
        )));
    }
    values.iter().enumerate().map(|(c, v)| discretize(*v, thr.cell(c))).collect()
}

/// Exact uniform distribution over `n_bins` categories.
pub fn climatological_reference(n_bins: usize) -> Result<Vec<f64>> {
    if n_bins < 2 {
        return Err(Error::Validation(format!("need at least 2 bins, got {n_bins}")));
    }
    Ok(alloc::vec![1.0 / n_bins as f64; n_bins])
}
