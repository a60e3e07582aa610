//! Run configuration with defaults for every optional key.

use alloc::format;
use alloc::vec::Vec;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::{add_days, initialization_dates};
use crate::climatology::WEEK;
use crate::datagen::SynthWorldConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::training::{AdamWConfig, ECCTSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
}

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YearRange {
    pub first: i32,
    pub last: i32,
}

impl YearRange {
    pub const fn new(first: i32, last: i32) -> Self {
        Self { first, last }
    }

    pub fn years(&self) -> Vec<i32> {
        (self.first..=self.last).collect()
    }

    pub fn overlaps(&self, other: &YearRange) -> bool {
        self.first <= other.last && other.first <= self.last
    }

    pub fn first_day(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.first, 1, 1).expect("year in range")
    }

    pub fn last_day(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.last, 12, 31).expect("year in range")
    }
}

/// Forecast day on which lead week `week` ends.
pub fn lead_day(week: u32) -> u32 {
    week * WEEK as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Verified lead weeks; week `w` is the weekly mean ending on forecast
    /// day `7 w`.
    pub lead_weeks: Vec<u32>,
    pub n_resamples: usize,
    pub level: f64,
    /// Threshold cutoff (physical units) below which a cell counts as arid.
    pub arid_cutoff: f64,
    /// Latitude-weighted spatial means; uniform weights otherwise.
    pub latitude_weighting: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lead_weeks: alloc::vec![1, 2],
            n_resamples: crate::evaluation::DEFAULT_RESAMPLES,
            level: crate::evaluation::DEFAULT_LEVEL,
            arid_cutoff: crate::grid::DEFAULT_ARID_CUTOFF_MM,
            latitude_weighting: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub climatology_period: YearRange,
    pub training_period: YearRange,
    pub test_period: YearRange,
    /// Number of quantile bins K.
    pub n_bins: usize,
    /// Ensemble members M at inference.
    pub members: usize,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    pub schedule: ECCTSchedule,
    pub world: SynthWorldConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec { n_lat: 8, n_lon: 16 },
            climatology_period: YearRange::new(2002, 2021),
            training_period: YearRange::new(2017, 2021),
            test_period: YearRange::new(2022, 2022),
            n_bins: 5,
            members: 8,
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            model: ModelConfig::default(),
            schedule: ECCTSchedule::default(),
            world: SynthWorldConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.schedule.iters_per_step = 50;
        c.model.width = 16;
        c.model.cond_hidden = 8;
        c.optimizer.lr = 1e-3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Validation(m));
        if self.n_bins < 2 {
            return bad(format!("K must be at least 2, got {}", self.n_bins));
        }
        if self.members == 0 {
            return bad("M must be at least 1".into());
        }
        if self.grid.n_lat == 0 || self.grid.n_lon == 0 {
            return bad("grid needs at least one cell".into());
        }
        for (name, r) in [
            ("climatology", &self.climatology_period),
            ("training", &self.training_period),
            ("test", &self.test_period),
        ] {
            if r.first > r.last || NaiveDate::from_ymd_opt(r.first, 1, 1).is_none() || NaiveDate::from_ymd_opt(r.last, 1, 1).is_none() {
                return bad(format!("{name} period {}..{} is empty or out of range", r.first, r.last));
            }
        }
        if self.climatology_period.overlaps(&self.test_period) {
            return bad(format!(
                "climatology period {}-{} overlaps test period {}-{}",
                self.climatology_period.first, self.climatology_period.last, self.test_period.first, self.test_period.last
            ));
        }
        if self.training_period.overlaps(&self.test_period) {
            return bad("training period overlaps test period".into());
        }
        if self.eval.lead_weeks.is_empty() || self.eval.lead_weeks.contains(&0) {
            return bad(format!("lead weeks {:?} must be non-empty and positive", self.eval.lead_weeks));
        }
        if self.eval.n_resamples == 0 || !(self.eval.level > 0.0 && self.eval.level < 1.0) {
            return bad("bootstrap needs resamples and a level in (0, 1)".into());
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.world_config().validate()
    }

    /// Model settings with the run's grid channels and bin count.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { n_bins: self.n_bins, ..self.model.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule.clone(),
            optimizer: self.optimizer,
            weights: self.weights,
            seed: self.seed,
            checkpoint_every: 0,
        }
    }

    /// World settings on the run's grid.
    pub fn world_config(&self) -> SynthWorldConfig {
        SynthWorldConfig { n_lat: self.grid.n_lat, n_lon: self.grid.n_lon, ..self.world.clone() }
    }

    /// Last forecast day any verified lead needs.
    pub fn max_lead(&self) -> u32 {
        self.eval.lead_weeks.iter().map(|w| lead_day(*w)).max().unwrap_or(0)
    }

    /// Daily data span covering every climatology window, training rollout
    /// and verified lead.
    pub fn data_range(&self) -> (NaiveDate, NaiveDate) {
        let first_year = self.climatology_period.first.min(self.training_period.first).min(self.test_period.first);
        let last_year = self.climatology_period.last.max(self.training_period.last).max(self.test_period.last);
        let first = NaiveDate::from_ymd_opt(first_year - 1, 12, 1).expect("year in range");
        let tail = self.max_lead().max(self.schedule.max_depth() as u32) as i64 + 2 * WEEK as i64;
        let last = add_days(NaiveDate::from_ymd_opt(last_year, 12, 31).expect("year in range"), tail);
        (first, last)
    }

    /// Monday/Thursday initializations of every test year.
    pub fn test_inits(&self) -> Result<Vec<NaiveDate>> {
        let mut out = Vec::new();
        for y in self.test_period.years() {
            out.extend(initialization_dates(y)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.weights.rps, c.weights.ce, c.weights.kl), (0.5, 0.1, 5e-4));
        assert_eq!(c.optimizer.lr, 2e-4);
        assert_eq!(c.model.tau_init, 1.0);
        assert_eq!((c.n_bins, c.members), (5, 8));
        assert_eq!(c.climatology_period, YearRange::new(2002, 2021));
        assert_eq!(c.test_period, YearRange::new(2022, 2022));
        assert!(c.validate().is_ok());
        assert!(RunConfig::desk().validate().is_ok());
    }

    #[test]
    fn validation_errors() {
        let c = RunConfig::default();
        assert!(RunConfig { n_bins: 1, ..c.clone() }.validate().is_err());
        assert!(RunConfig { members: 0, ..c.clone() }.validate().is_err());
        let overlap = RunConfig { test_period: YearRange::new(2021, 2021), training_period: YearRange::new(2015, 2019), ..c.clone() };
        assert!(matches!(overlap.validate(), Err(Error::Validation(m)) if m.contains("overlaps")));
        let mut short = c;
        short.eval.lead_weeks = alloc::vec![0];
        assert!(short.validate().is_err());
    }

    #[test]
    fn data_range_covers_every_use() {
        let c = RunConfig::default();
        let (first, last) = c.data_range();
        assert!(first <= add_days(c.climatology_period.first_day(), -4 - 6));
        assert!(last >= add_days(c.test_period.last_day(), c.max_lead() as i64 + 1));
        assert_eq!(c.test_inits().unwrap().len(), 104);
        assert_eq!(c.model_config().n_bins, 5);
    }
}
