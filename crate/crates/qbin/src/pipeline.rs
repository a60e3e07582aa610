//! End-to-end experiment stages on in-memory data: world generation,
//! climatology, training data, curriculum training, ensemble inference,
//! verification against climatology and baselines, and the reforecast
//! calibration study on the biased synthetic forecaster.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use qbin_core::calendar::{add_days, days_between, CLIMATOLOGY_OFFSETS};
use qbin_core::calibration::{
    ensemble_to_probabilities, model_thresholds, q80_mismatch_table, EnsembleForecast,
    MismatchTable,
};
use qbin_core::climatology::{
    discretize_field, rolling_weekly_series, CalendarClimatology, CategoryLabel, QuantileThresholds,
};
use qbin_core::config::{lead_day, RunConfig};
use qbin_core::datagen::{generate_truth, synthetic_land_mask, BiasedForecaster};
use qbin_core::evaluation::{
    acc, armse, bootstrap, bss, rpss, tcc, top_bin_probability, BootstrapStatistic, MetricReport,
    SkillResult,
};
use qbin_core::field::DailySeries;
use qbin_core::grid::{
    build_arid_mask, latitude_weights, AridMetric, LatLonGrid, LatWeights, SpatialMask,
};
use qbin_core::model::{Forecaster, Normalizer, RolloutMode, StateWindow};
use qbin_core::rng::stream;
use qbin_core::tensor::{ParamStore, Tensor};
use qbin_core::training::{run_curriculum, StepContext, TrainerState, TrainingData, TrainingHooks};
use qbin_core::{Error, Result};

pub const PRECIP_UNITS: &str = "mm/day";
pub const DRIVER_UNITS: &str = "1";
/// Classified channel: precipitation.
pub const CLASSIFIED: usize = 0;
/// Channels taken through `log1p` before standardization.
pub const LOG1P: [bool; 2] = [true, false];

/// Daily truth of both channels with its grid and land mask.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub grid: LatLonGrid,
    pub precip: DailySeries,
    pub driver: DailySeries,
    pub weekly_precip: DailySeries,
    pub land: SpatialMask,
}

impl World {
    pub fn new(
        grid: LatLonGrid,
        precip: DailySeries,
        driver: DailySeries,
        land: SpatialMask,
    ) -> Result<Self> {
        if precip.start() != driver.start() || precip.len() != driver.len() {
            return Err(Error::ShapeMismatch(
                "channels cover different dates".into(),
            ));
        }
        if precip.width() != grid.n_cells()
            || land.n_lat() != grid.n_lat()
            || land.n_lon() != grid.n_lon()
        {
            return Err(Error::ShapeMismatch(
                "channels or land mask do not match the grid".into(),
            ));
        }
        let weekly_precip = rolling_weekly_series(&precip)?;
        Ok(Self {
            grid,
            precip,
            driver,
            weekly_precip,
            land,
        })
    }

    /// Synthetic world covering the configuration's data range.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let (first, last) = cfg.data_range();
        let truth = generate_truth(&cfg.world_config(), first, last)?;
        let land = synthetic_land_mask(cfg.grid.n_lat, cfg.grid.n_lon)?;
        Self::new(truth.grid, truth.precip, truth.driver, land)
    }

    pub fn channels(&self) -> [&DailySeries; 2] {
        [&self.precip, &self.driver]
    }

    pub fn n_lat(&self) -> usize {
        self.grid.n_lat()
    }

    pub fn n_lon(&self) -> usize {
        self.grid.n_lon()
    }

    /// Normalized state on `date`.
    pub fn state(&self, normalizer: &Normalizer, date: NaiveDate) -> Result<Tensor> {
        let fields = self
            .channels()
            .iter()
            .map(|s| s.require(date, "state"))
            .collect::<Result<Vec<_>>>()?;
        normalizer.state(&fields, self.n_lat(), self.n_lon())
    }
}

/// Calendar-day climatology of weekly precipitation over the climatology period.
pub fn build_climatology(cfg: &RunConfig, world: &World) -> Result<CalendarClimatology> {
    CalendarClimatology::build(
        &world.weekly_precip,
        &cfg.climatology_period.years(),
        &CLIMATOLOGY_OFFSETS,
        cfg.n_bins,
    )
}

pub fn fit_normalizer(cfg: &RunConfig, world: &World) -> Result<Normalizer> {
    Normalizer::fit(
        &world.channels(),
        &LOG1P,
        cfg.training_period.first_day(),
        cfg.training_period.last_day(),
    )
}

/// States and labels of the training period.
pub fn training_data(
    cfg: &RunConfig,
    world: &World,
    normalizer: &Normalizer,
    clim: &CalendarClimatology,
) -> Result<TrainingData> {
    TrainingData::from_series(
        &world.channels(),
        normalizer,
        &world.weekly_precip,
        clim,
        cfg.training_period.first_day(),
        cfg.training_period.last_day(),
        world.n_lat(),
        world.n_lon(),
    )
}

pub fn spatial_weights(cfg: &RunConfig, grid: &LatLonGrid) -> Result<LatWeights> {
    if cfg.eval.latitude_weighting {
        latitude_weights(grid)
    } else {
        Ok(LatWeights::uniform(grid.n_lat()))
    }
}

/// Fresh model whose initial weights depend only on `seed`.
pub fn init_model(cfg: &RunConfig, seed: u64) -> Result<(Forecaster, ParamStore)> {
    let mut rng = stream(seed, 0x1417, 0);
    Forecaster::new(cfg.model_config(), cfg.grid.n_lat, cfg.grid.n_lon, &mut rng)
}

/// Runs the curriculum from `state` until iteration `until` (or the end).
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &RunConfig,
    grid: &LatLonGrid,
    data: &TrainingData,
    model: &Forecaster,
    store: &mut ParamStore,
    state: &mut TrainerState,
    until: Option<u64>,
    hooks: &mut dyn TrainingHooks,
) -> Result<()> {
    // Training losses always use latitude weights.
    let alpha = latitude_weights(grid)?;
    let ctx = StepContext {
        model,
        data,
        alpha: &alpha,
        weights: &cfg.weights,
    };
    run_curriculum(&ctx, store, &cfg.train_config(), state, until, hooks)
}

/// Forecast of one (init, lead week).
#[derive(Debug, Clone, PartialEq)]
pub struct LeadForecast {
    /// `[member][channel][cell]`, physical units, on the lead's last day.
    pub member_fields: Vec<Vec<Vec<f64>>>,
    /// `[member][cell]` weekly mean of the classified channel.
    pub member_weekly: Vec<Vec<f64>>,
    /// `[member]` bin-major probabilities.
    pub member_probs: Vec<Vec<f64>>,
    pub mean_probs: Vec<f64>,
}

impl LeadForecast {
    pub fn ensemble_mean_weekly(&self) -> Vec<f64> {
        let m = self.member_weekly.len() as f64;
        let mut out = vec![0.0; self.member_weekly[0].len()];
        for w in &self.member_weekly {
            for (o, v) in out.iter_mut().zip(w) {
                *o += v / m;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub n_members: usize,
    pub n_bins: usize,
    pub lead_weeks: Vec<u32>,
    pub inits: Vec<NaiveDate>,
    pub entries: BTreeMap<(NaiveDate, u32), LeadForecast>,
}

impl ForecastSet {
    pub fn get(&self, init: NaiveDate, week: u32) -> Result<&LeadForecast> {
        self.entries
            .get(&(init, week))
            .ok_or_else(|| Error::MissingData(format!("forecast for {init} week {week}")))
    }
}

fn epoch_day(date: NaiveDate) -> u64 {
    days_between(NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch"), date) as u64
}

/// Prior noise of `member` for the rollout started at `init`.
pub fn member_noise(model: &Forecaster, seed: u64, init: NaiveDate, member: usize) -> Tensor {
    let mut rng = stream(seed, epoch_day(init), 0x1000 + member as u64);
    Tensor::randn(&model.state_shape(), 1.0, &mut rng)
}

/// `members` prior-perturbed rollouts from every init. Member probabilities
/// are averaged into the ensemble probability forecast.
pub fn infer(
    model: &Forecaster,
    store: &ParamStore,
    normalizer: &Normalizer,
    world: &World,
    inits: &[NaiveDate],
    lead_weeks: &[u32],
    members: usize,
    seed: u64,
) -> Result<ForecastSet> {
    if members == 0 {
        return Err(Error::Validation(
            "inference needs at least one member".into(),
        ));
    }
    let n_bins = model.config().n_bins;
    let channels = normalizer.channels();
    let n_steps = lead_weeks
        .iter()
        .map(|w| lead_day(*w))
        .max()
        .ok_or_else(|| Error::Empty("lead weeks".into()))? as usize;
    let mut entries = BTreeMap::new();
    for &init in inits {
        let window = StateWindow {
            prev: world.state(normalizer, add_days(init, -1))?,
            cur: world.state(normalizer, init)?,
            next: None,
            date: init,
        };
        let mut per_week: BTreeMap<u32, LeadForecast> = lead_weeks
            .iter()
            .map(|w| {
                (
                    *w,
                    LeadForecast {
                        member_fields: vec![],
                        member_weekly: vec![],
                        member_probs: vec![],
                        mean_probs: vec![],
                    },
                )
            })
            .collect();
        for m in 0..members {
            let noise = member_noise(model, seed, init, m);
            let roll = model.rollout(store, &window, n_steps, RolloutMode::Infer, noise)?;
            for (&w, lf) in per_week.iter_mut() {
                let day = lead_day(w) as usize;
                let out = &roll.outputs[day - 1];
                lf.member_fields.push(
                    (0..channels)
                        .map(|c| normalizer.physical_channel(&out.y, c))
                        .collect(),
                );
                let mut weekly = vec![0.0; world.grid.n_cells()];
                for o in &roll.outputs[day - 7..day] {
                    for (acc, v) in weekly
                        .iter_mut()
                        .zip(normalizer.physical_channel(&o.y, CLASSIFIED))
                    {
                        *acc += v / 7.0;
                    }
                }
                lf.member_weekly.push(weekly);
                lf.member_probs.push(out.probs.data().to_vec());
            }
        }
        for (w, mut lf) in per_week {
            let mut mean = vec![0.0; lf.member_probs[0].len()];
            for p in &lf.member_probs {
                for (a, v) in mean.iter_mut().zip(p) {
                    *a += v;
                }
            }
            mean.iter_mut().for_each(|a| *a /= members as f64);
            lf.mean_probs = mean;
            entries.insert((init, w), lf);
        }
    }
    Ok(ForecastSet {
        n_members: members,
        n_bins,
        lead_weeks: lead_weeks.to_vec(),
        inits: inits.to_vec(),
        entries,
    })
}

/// Probabilities from counting raw ensemble members against the observed
/// thresholds (no model-specific calibration).
pub fn raw_ensemble_probabilities(
    lf: &LeadForecast,
    init: NaiveDate,
    week: u32,
    thr: &QuantileThresholds,
) -> Result<Vec<f64>> {
    let ens = EnsembleForecast::new(init, lead_day(week), lf.member_weekly.clone())?;
    Ok(ensemble_to_probabilities(&ens, thr)?.probabilities())
}

/// Per-lead verification inputs gathered from a forecast set.
struct LeadData {
    labels: Vec<Vec<CategoryLabel>>,
    obs_anom: Vec<Vec<f64>>,
    fc_anom: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    raw_probs: Vec<Vec<f64>>,
    baseline_probs: Option<Vec<Vec<f64>>>,
    thresholds: Vec<QuantileThresholds>,
}

fn gather(
    world: &World,
    clim: &CalendarClimatology,
    fc: &ForecastSet,
    baseline: Option<&ForecastSet>,
    week: u32,
) -> Result<LeadData> {
    let mut d = LeadData {
        labels: vec![],
        obs_anom: vec![],
        fc_anom: vec![],
        probs: vec![],
        raw_probs: vec![],
        baseline_probs: baseline.map(|_| vec![]),
        thresholds: vec![],
    };
    for &init in &fc.inits {
        let target = add_days(init, lead_day(week) as i64);
        let obs = world
            .weekly_precip
            .require(target, "verifying observation")?;
        let thr = clim.thresholds(target);
        let mean = clim.mean(target);
        let lf = fc.get(init, week)?;
        d.labels.push(discretize_field(obs, thr)?);
        d.obs_anom
            .push(obs.iter().zip(mean).map(|(o, m)| o - m).collect());
        d.fc_anom.push(
            lf.ensemble_mean_weekly()
                .iter()
                .zip(mean)
                .map(|(f, m)| f - m)
                .collect(),
        );
        d.probs.push(lf.mean_probs.clone());
        d.raw_probs
            .push(raw_ensemble_probabilities(lf, init, week, thr)?);
        if let (Some(b), Some(out)) = (baseline, d.baseline_probs.as_mut()) {
            out.push(b.get(init, week)?.mean_probs.clone());
        }
        d.thresholds.push(thr.clone());
    }
    Ok(d)
}

/// Verification output: the report plus the raw skill results behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// RPSS results keyed by (lead week, region, forecast name).
    pub rpss: BTreeMap<(u32, String, String), SkillResult>,
}

impl Evaluation {
    pub fn rpss_of(&self, week: u32, region: &str, name: &str) -> Option<&SkillResult> {
        self.rpss.get(&(week, region.to_string(), name.to_string()))
    }
}

pub const MODEL: &str = "model";
pub const RAW_ENSEMBLE: &str = "raw_ensemble";
pub const BASELINE: &str = "baseline";

/// Regions verified: all kept cells, land only and ocean only.
pub fn regions(world: &World) -> [(&'static str, SpatialMask); 3] {
    let n = (world.n_lat(), world.n_lon());
    [
        ("global", SpatialMask::full(n.0, n.1)),
        ("land", world.land.clone()),
        ("ocean", world.land.complement()),
    ]
}

/// Scores `fc` against the truth for every configured lead week and region,
/// with date-bootstrap intervals. The raw-threshold ensemble is always
/// verified alongside; `baseline` adds a second probabilistic forecast.
pub fn evaluate(
    cfg: &RunConfig,
    world: &World,
    clim: &CalendarClimatology,
    fc: &ForecastSet,
    baseline: Option<&ForecastSet>,
) -> Result<Evaluation> {
    if fc.inits.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: fc.inits.len(),
        });
    }
    let w = spatial_weights(cfg, &world.grid)?;
    let (n_lat, n_lon) = (world.n_lat(), world.n_lon());
    let k = fc.n_bins;
    let n = fc.inits.len();
    let boot_seed = cfg.seed;
    let mut report = MetricReport::default();
    let mut skills = BTreeMap::new();
    for &week in &fc.lead_weeks {
        let d = gather(world, clim, fc, baseline, week)?;
        let thr_refs: Vec<&QuantileThresholds> = d.thresholds.iter().collect();
        let rps_mask = build_arid_mask(
            &thr_refs,
            n_lat,
            n_lon,
            AridMetric::Rpss,
            cfg.eval.arid_cutoff,
        )?;
        let bs_mask = build_arid_mask(
            &thr_refs,
            n_lat,
            n_lon,
            AridMetric::Bss,
            cfg.eval.arid_cutoff,
        )?;
        let outcomes: Vec<Vec<bool>> = d
            .labels
            .iter()
            .map(|l| l.iter().map(|c| c.0 as usize == k).collect())
            .collect();
        let top: Vec<Vec<f64>> = d.probs.iter().map(|p| top_bin_probability(p, k)).collect();
        for (region, rmask) in regions(world) {
            let mask = rps_mask.intersect(&rmask)?;
            if mask.count() == 0 {
                continue;
            }
            let mut push_skill = |name: &str,
                                  probs: &[Vec<f64>],
                                  report: &mut MetricReport|
             -> Result<SkillResult> {
                let s = rpss(probs, &d.labels, k, &w, &mask)?;
                let b = bootstrap(
                    &s.model_per_init,
                    &s.reference_per_init,
                    BootstrapStatistic::Skill,
                    cfg.eval.n_resamples,
                    cfg.eval.level,
                    boot_seed,
                )?;
                let metric = if name == MODEL {
                    "rpss".to_string()
                } else {
                    format!("rpss_{name}")
                };
                report.push_bootstrap(&metric, week, region, &b, n)?;
                skills.insert((week, region.to_string(), name.to_string()), s.clone());
                Ok(s)
            };
            let model = push_skill(MODEL, &d.probs, &mut report)?;
            let raw = push_skill(RAW_ENSEMBLE, &d.raw_probs, &mut report)?;
            let vs = |other: &SkillResult| {
                bootstrap(
                    &model.model_per_init,
                    &other.model_per_init,
                    BootstrapStatistic::Skill,
                    cfg.eval.n_resamples,
                    cfg.eval.level,
                    boot_seed,
                )
            };
            report.push_bootstrap("rpss_vs_raw_ensemble", week, region, &vs(&raw)?, n)?;
            if let Some(bp) = &d.baseline_probs {
                let base = push_skill(BASELINE, bp, &mut report)?;
                report.push_bootstrap("rpss_vs_baseline", week, region, &vs(&base)?, n)?;
            }

            let bmask = bs_mask.intersect(&rmask)?;
            if bmask.count() > 0 {
                let s = bss(&top, &outcomes, 1.0 / k as f64, &w, &bmask)?;
                let b = bootstrap(
                    &s.model_per_init,
                    &s.reference_per_init,
                    BootstrapStatistic::Skill,
                    cfg.eval.n_resamples,
                    cfg.eval.level,
                    boot_seed,
                )?;
                report.push_bootstrap("bss", week, region, &b, n)?;
            }
            report.push_point(
                "armse",
                week,
                region,
                armse(&d.fc_anom, &d.obs_anom, &w, &mask)?,
                n,
            )?;
            match acc(&d.fc_anom, &d.obs_anom, &w, &mask) {
                Ok(v) => report.push_point("acc", week, region, v, n)?,
                Err(Error::ZeroNorm(_)) => {}
                Err(e) => return Err(e),
            }
            match tcc(&d.fc_anom, &d.obs_anom, &w, &mask) {
                Ok(t) => report.push_point("tcc", week, region, t.value, n)?,
                Err(Error::EmptyMask) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Evaluation {
        report,
        rpss: skills,
    })
}

/// Reforecast calibration study on the biased synthetic forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStudy {
    pub mismatch: MismatchTable,
    /// Bin frequencies of fresh forecasts discretized against the model's own
    /// (reforecast) thresholds.
    pub calibrated_frequencies: Vec<f64>,
    /// Bin frequencies of the same forecasts against observed thresholds.
    pub raw_frequencies: Vec<f64>,
    pub n_draws: usize,
    pub kept_cells: usize,
}

/// Builds model thresholds from `reforecast_members` reforecast members per
/// climatology date, compares their top boundary with the observed one, and
/// discretizes `fresh_members` new draws per init against both threshold sets.
pub fn calibration_study(
    cfg: &RunConfig,
    world: &World,
    clim: &CalendarClimatology,
    inits: &[NaiveDate],
    week: u32,
    reforecast_members: usize,
    fresh_members: usize,
) -> Result<CalibrationStudy> {
    let wc = cfg.world_config();
    let fc = BiasedForecaster::new(
        &world.precip,
        wc.bias,
        wc.forecast_noise_sd,
        reforecast_members,
        wc.seed,
    )?;
    let lead = lead_day(week);
    let years = cfg.climatology_period.years();
    let k = cfg.n_bins;
    let mut model = Vec::with_capacity(inits.len());
    let mut observed = Vec::with_capacity(inits.len());
    for &init in inits {
        model.push((
            init,
            model_thresholds(&fc, init, lead, &years, &CLIMATOLOGY_OFFSETS, k)?,
        ));
        observed.push((init, clim.thresholds(add_days(init, lead as i64)).clone()));
    }
    let obs_refs: Vec<&QuantileThresholds> = observed.iter().map(|(_, t)| t).collect();
    let mask = build_arid_mask(
        &obs_refs,
        world.n_lat(),
        world.n_lon(),
        AridMetric::Bss,
        cfg.eval.arid_cutoff,
    )?;
    let mismatch = q80_mismatch_table(&model, &observed, &world.grid, &mask)?;

    let mut calibrated = vec![0usize; k];
    let mut raw = vec![0usize; k];
    let mut n_draws = 0;
    for ((init, mt), (_, ot)) in model.iter().zip(&observed) {
        for m in 0..fresh_members {
            let draw = fc.draw(*init, lead, (reforecast_members + m) as u32)?;
            let cal = discretize_field(&draw, mt)?;
            let unc = discretize_field(&draw, ot)?;
            for c in (0..draw.len()).filter(|c| mask.is_kept(*c)) {
                calibrated[cal[c].index()] += 1;
                raw[unc[c].index()] += 1;
                n_draws += 1;
            }
        }
    }
    let freq = |v: &[usize]| {
        v.iter()
            .map(|c| *c as f64 / n_draws.max(1) as f64)
            .collect()
    };
    Ok(CalibrationStudy {
        mismatch,
        calibrated_frequencies: freq(&calibrated),
        raw_frequencies: freq(&raw),
        n_draws,
        kept_cells: mask.count(),
    })
}
