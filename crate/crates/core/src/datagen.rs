//! Synthetic world standing in for reanalysis data. A latent field follows an
//! AR(1) recursion in time, is advected eastward by a fractional longitude
//! shift and forced by spatially smoothed Gaussian noise. Two channels are
//! observed: a nonnegative, skewed precipitation channel
//! `scale * softplus(offset(lat) + seasonal + latent)` and a driver channel
//! `seasonal + latent`. A latitude band with a strongly negative offset stays
//! arid.
//!
//! A lazily evaluated biased forecaster emits `max(0, b * truth + noise)` per
//! member, where truth is the trailing weekly mean precipitation at the
//! target date. With `b < 1` its upper quantiles sit systematically below the
//! observed ones.

use alloc::format;
use alloc::vec::Vec;
use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calendar::{add_days, days_between, periodic_day_of_year};
use crate::calibration::ReforecastArchive;
use crate::climatology::rolling_weekly_series;
use crate::error::{Error, Result};
use crate::field::DailySeries;
use crate::grid::{LatLonGrid, SpatialMask};
use crate::rng::stream;

pub const PRECIP: &str = "precip";
pub const DRIVER: &str = "driver";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthWorldConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Lag-1 coefficient of the latent recursion.
    pub ar_coefficient: f64,
    /// Innovation standard deviation per day.
    pub noise_sd: f64,
    pub seasonal_amplitude: f64,
    /// Eastward advection, grid cells per day.
    pub advection_speed: f64,
    pub precip_scale: f64,
    pub precip_offset: f64,
    /// Latitude band (degrees, inclusive) that receives `dry_offset`.
    pub dry_band: (f64, f64),
    pub dry_offset: f64,
    /// Multiplicative bias `b` of the synthetic forecaster.
    pub bias: f64,
    pub forecast_noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            n_lat: 8,
            n_lon: 16,
            ar_coefficient: 0.99,
            noise_sd: 0.35,
            seasonal_amplitude: 1.0,
            advection_speed: 0.0,
            precip_scale: 2.0,
            precip_offset: 0.0,
            dry_band: (20.0, 40.0),
            dry_offset: -25.0,
            bias: 0.7,
            forecast_noise_sd: 0.1,
            seed: 0,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lat == 0 || self.n_lon == 0 {
            return Err(Error::Validation("synthetic grid needs at least one cell".into()));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Validation(format!("noise sd must be positive, got {}", self.noise_sd)));
        }
        if !(self.bias > 0.0 && self.bias.is_finite()) {
            return Err(Error::Validation(format!("forecaster bias must be positive, got {}", self.bias)));
        }
        if !(self.ar_coefficient.abs() < 1.0) {
            return Err(Error::Validation(format!("AR coefficient {} is not stationary", self.ar_coefficient)));
        }
        if !(self.forecast_noise_sd >= 0.0) || !(self.precip_scale > 0.0) || !self.advection_speed.is_finite() {
            return Err(Error::Validation("forecaster noise, precipitation scale or advection out of range".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<LatLonGrid> {
        LatLonGrid::cell_centered(self.n_lat, self.n_lon)
    }
}

/// Generated truth: daily channels plus the hidden latent field.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub grid: LatLonGrid,
    pub precip: DailySeries,
    pub driver: DailySeries,
    pub latent: DailySeries,
}

impl SynthTruth {
    pub fn channels(&self) -> [&DailySeries; 2] {
        [&self.precip, &self.driver]
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Unit-variance noise smoothed with half-weight nearest neighbours
/// (periodic in longitude).
fn smoothed_noise<R: Rng>(rng: &mut R, n_lat: usize, n_lon: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..n_lat * n_lon).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = alloc::vec![0.0; white.len()];
    for i in 0..n_lat {
        for j in 0..n_lon {
            let mut s = white[i * n_lon + j];
            let mut n_nb = 0usize;
            if n_lon > 1 {
                s += 0.5 * (white[i * n_lon + (j + 1) % n_lon] + white[i * n_lon + (j + n_lon - 1) % n_lon]);
                n_nb += 2;
            }
            if i > 0 {
                s += 0.5 * white[(i - 1) * n_lon + j];
                n_nb += 1;
            }
            if i + 1 < n_lat {
                s += 0.5 * white[(i + 1) * n_lon + j];
                n_nb += 1;
            }
            out[i * n_lon + j] = s / libm::sqrt(1.0 + 0.25 * n_nb as f64);
        }
    }
    out
}

fn advect(field: &[f64], n_lat: usize, n_lon: usize, speed: f64) -> Vec<f64> {
    let shift = speed.rem_euclid(n_lon as f64);
    let whole = libm::floor(shift) as usize;
    let frac = shift - whole as f64;
    let mut out = alloc::vec![0.0; field.len()];
    for i in 0..n_lat {
        let row = &field[i * n_lon..(i + 1) * n_lon];
        for j in 0..n_lon {
            let a = row[(j + 2 * n_lon - whole) % n_lon];
            let b = row[(j + 2 * n_lon - whole - 1) % n_lon];
            out[i * n_lon + j] = (1.0 - frac) * a + frac * b;
        }
    }
    out
}

/// Daily truth over `[first, last]`, deterministic per seed.
pub fn generate_truth(cfg: &SynthWorldConfig, first: NaiveDate, last: NaiveDate) -> Result<SynthTruth> {
    cfg.validate()?;
    generate(cfg, first, last)
}

fn generate(cfg: &SynthWorldConfig, first: NaiveDate, last: NaiveDate) -> Result<SynthTruth> {
    let n_days = days_between(first, last) + 1;
    if n_days < 1 {
        return Err(Error::Validation(format!("empty date range {first}..{last}")));
    }
    let grid = cfg.grid()?;
    let (n_lat, n_lon) = (cfg.n_lat, cfg.n_lon);
    let offsets: Vec<f64> = grid
        .latitudes()
        .iter()
        .map(|&lat| {
            let dry = lat >= cfg.dry_band.0 && lat <= cfg.dry_band.1;
            cfg.precip_offset + if dry { cfg.dry_offset } else { 0.0 }
        })
        .collect();
    let hemisphere: Vec<f64> = grid.latitudes().iter().map(|&l| if l >= 0.0 { 1.0 } else { -1.0 }).collect();

    let mut rng = stream(cfg.seed, 0x5eed, 0);
    let stationary = cfg.noise_sd / libm::sqrt(1.0 - cfg.ar_coefficient * cfg.ar_coefficient);
    let mut latent: Vec<f64> = smoothed_noise(&mut rng, n_lat, n_lon).into_iter().map(|z| stationary * z).collect();

    let mut precip = Vec::with_capacity(n_days as usize);
    let mut driver = Vec::with_capacity(n_days as usize);
    let mut latents = Vec::with_capacity(n_days as usize);
    for d in 0..n_days {
        let date = add_days(first, d);
        if d > 0 {
            let noise = smoothed_noise(&mut rng, n_lat, n_lon);
            latent = advect(&latent, n_lat, n_lon, cfg.advection_speed)
                .into_iter()
                .zip(noise)
                .map(|(l, z)| cfg.ar_coefficient * l + cfg.noise_sd * z)
                .collect();
        }
        let (_, cos) = periodic_day_of_year(date);
        let mut p = alloc::vec![0.0; latent.len()];
        let mut x = alloc::vec![0.0; latent.len()];
        for c in 0..latent.len() {
            let i = c / n_lon;
            let seasonal = cfg.seasonal_amplitude * hemisphere[i] * cos;
            x[c] = seasonal + latent[c];
            p[c] = cfg.precip_scale * softplus(offsets[i] + x[c]);
        }
        precip.push(p);
        driver.push(x);
        latents.push(latent.clone());
    }
    let cells = n_lat * n_lon;
    Ok(SynthTruth {
        grid,
        precip: DailySeries::new(first, cells, precip)?,
        driver: DailySeries::new(first, cells, driver)?,
        latent: DailySeries::new(first, cells, latents)?,
    })
}

/// Deterministic land mask with two blocky continents.
pub fn synthetic_land_mask(n_lat: usize, n_lon: usize) -> Result<SpatialMask> {
    let mut keep = alloc::vec![false; n_lat * n_lon];
    for i in 0..n_lat {
        for j in 0..n_lon {
            let y = (i as f64 + 0.5) / n_lat as f64;
            let x = (j as f64 + 0.5) / n_lon as f64;
            let west = (0.1..0.35).contains(&x) && (0.1..0.8).contains(&y);
            let east = (0.55..0.8).contains(&x) && (0.3..0.95).contains(&y);
            keep[i * n_lon + j] = west || east;
        }
    }
    SpatialMask::from_keep(n_lat, n_lon, keep)
}

/// Lazily evaluated ensemble forecaster `max(0, b * weekly_truth(init + lead) + noise)`.
/// Member noise depends only on (seed, init, lead, member).
#[derive(Debug, Clone)]
pub struct BiasedForecaster {
    weekly: DailySeries,
    bias: f64,
    noise_sd: f64,
    n_members: usize,
    seed: u64,
}

impl BiasedForecaster {
    /// `daily_precip` is the truth; trailing weekly means are taken here.
    pub fn new(daily_precip: &DailySeries, bias: f64, noise_sd: f64, n_members: usize, seed: u64) -> Result<Self> {
        if !(bias > 0.0) || !(noise_sd >= 0.0) || n_members == 0 {
            return Err(Error::Validation(format!("bias {bias}, noise {noise_sd}, {n_members} members")));
        }
        Ok(Self { weekly: rolling_weekly_series(daily_precip)?, bias, noise_sd, n_members, seed })
    }

    pub fn from_config(truth: &SynthTruth, cfg: &SynthWorldConfig, n_members: usize) -> Result<Self> {
        Self::new(&truth.precip, cfg.bias, cfg.forecast_noise_sd, n_members, cfg.seed)
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    /// Independent draw `member` for (init, lead), including members beyond
    /// the archive size.
    pub fn draw(&self, init: NaiveDate, lead: u32, member: u32) -> Result<Vec<f64>> {
        let target = add_days(init, lead as i64);
        let truth = self.weekly.require(target, "synthetic forecaster truth")?;
        let key = days_between(NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch"), init) as u64;
        let mut rng = stream(self.seed ^ 0xf0ca_57e2, key, ((lead as u64) << 32) | member as u64);
        Ok(truth
            .iter()
            .map(|&t| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (self.bias * t + self.noise_sd * z).max(0.0)
            })
            .collect())
    }
}

impl ReforecastArchive for BiasedForecaster {
    fn members(&self, init: NaiveDate, lead: u32) -> Result<Vec<Vec<f64>>> {
        (0..self.n_members as u32).map(|m| self.draw(init, lead, m)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::same_calendar_day;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn validation() {
        let ok = SynthWorldConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SynthWorldConfig { noise_sd: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SynthWorldConfig { bias: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SynthWorldConfig { ar_coefficient: 1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn same_seed_is_bit_identical_and_seeds_differ() {
        let cfg = SynthWorldConfig { n_lat: 4, n_lon: 8, advection_speed: 0.3, ..Default::default() };
        let a = generate_truth(&cfg, d(2001, 12, 1), d(2002, 3, 1)).unwrap();
        let b = generate_truth(&cfg, d(2001, 12, 1), d(2002, 3, 1)).unwrap();
        assert_eq!(a, b);
        let c = generate_truth(&SynthWorldConfig { seed: 1, ..cfg }, d(2001, 12, 1), d(2002, 3, 1)).unwrap();
        assert_ne!(a.latent, c.latent);
    }

    #[test]
    fn zero_noise_limit_is_periodic() {
        let cfg = SynthWorldConfig { noise_sd: 0.0, n_lat: 4, n_lon: 8, ..Default::default() };
        let t = generate(&cfg, d(2002, 1, 1), d(2003, 12, 31)).unwrap();
        for day in d(2002, 1, 1).iter_days().take(365) {
            let next = same_calendar_day(day, 2003);
            assert_eq!(t.precip.get(day), t.precip.get(next));
            assert_eq!(t.driver.get(day), t.driver.get(next));
        }
    }

    #[test]
    fn latent_lag_one_autocorrelation() {
        let cfg = SynthWorldConfig { n_lat: 2, n_lon: 2, advection_speed: 0.0, ..Default::default() };
        let t = generate_truth(&cfg, d(2000, 1, 1), add_days(d(2000, 1, 1), 9_999)).unwrap();
        let x: Vec<f64> = t.latent.days().iter().map(|f| f[0]).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        let r = cov / var;
        assert!((r - cfg.ar_coefficient).abs() < 0.05, "lag-1 autocorrelation {r}");
    }

    #[test]
    fn precipitation_is_nonnegative_and_dry_band_is_arid() {
        let cfg = SynthWorldConfig::default();
        let t = generate_truth(&cfg, d(2002, 1, 1), d(2002, 12, 31)).unwrap();
        assert!(t.precip.days().iter().flatten().all(|v| *v >= 0.0));
        let dry_row = t.grid.latitudes().iter().position(|l| (20.0..=40.0).contains(l)).unwrap();
        let wet_row = t.grid.latitudes().iter().position(|l| *l < 0.0).unwrap();
        let max_dry = t.precip.days().iter().flat_map(|f| f[dry_row * 16..(dry_row + 1) * 16].to_vec()).fold(0.0, f64::max);
        let mean_wet = t.precip.days().iter().map(|f| f[wet_row * 16]).sum::<f64>() / 365.0;
        assert!(max_dry < 0.005, "dry band max {max_dry}");
        assert!(mean_wet > 0.5);
    }

    /// Solves a small dense system by Gaussian elimination with partial pivoting.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, p);
            b.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = alloc::vec![0.0; n];
        for k in (0..n).rev() {
            x[k] = (b[k] - (k + 1..n).map(|j| a[k][j] * x[j]).sum::<f64>()) / a[k][k];
        }
        x
    }

    #[test]
    fn linear_predictor_beats_persistence_out_of_sample() {
        let cfg = SynthWorldConfig { n_lat: 4, n_lon: 8, advection_speed: 0.3, ..Default::default() };
        let t = generate_truth(&cfg, d(2002, 1, 1), d(2005, 12, 31)).unwrap();
        let days = t.driver.days();
        let half = days.len() / 2;
        let features = |f: &[f64], c: usize| {
            let (i, j) = (c / 8, c % 8);
            [f[c], f[i * 8 + (j + 7) % 8], f[i * 8 + (j + 1) % 8], 1.0]
        };
        let (mut lin, mut pers) = (0.0, 0.0);
        for c in 0..32 {
            let mut ata = alloc::vec![alloc::vec![0.0; 4]; 4];
            let mut atb = alloc::vec![0.0; 4];
            for s in 0..half - 1 {
                let x = features(&days[s], c);
                for r in 0..4 {
                    atb[r] += x[r] * days[s + 1][c];
                    for q in 0..4 {
                        ata[r][q] += x[r] * x[q];
                    }
                }
            }
            let beta = solve(ata, atb);
            for s in half..days.len() - 1 {
                let x = features(&days[s], c);
                let pred: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
                lin += (pred - days[s + 1][c]).powi(2);
                pers += (days[s][c] - days[s + 1][c]).powi(2);
            }
        }
        assert!(lin < pers, "linear {lin} vs persistence {pers}");
    }

    #[test]
    fn forecaster_is_deterministic_and_unbiased_at_b_one() {
        let cfg = SynthWorldConfig { n_lat: 2, n_lon: 4, ..Default::default() };
        let t = generate_truth(&cfg, d(2002, 1, 1), d(2002, 3, 1)).unwrap();
        let exact = BiasedForecaster::new(&t.precip, 1.0, 0.0, 3, 7).unwrap();
        let weekly = rolling_weekly_series(&t.precip).unwrap();
        let m = exact.members(d(2002, 1, 20), 14).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.iter().all(|f| f.as_slice() == weekly.get(d(2002, 2, 3)).unwrap()));
        let noisy = BiasedForecaster::new(&t.precip, 0.7, 0.2, 4, 7).unwrap();
        assert_eq!(noisy.members(d(2002, 1, 20), 14).unwrap(), noisy.members(d(2002, 1, 20), 14).unwrap());
        assert_ne!(noisy.draw(d(2002, 1, 20), 14, 0).unwrap(), noisy.draw(d(2002, 1, 20), 14, 1).unwrap());
        assert!(noisy.members(d(2002, 2, 28), 14).is_err());
    }

    #[test]
    fn land_mask_is_partial() {
        let m = synthetic_land_mask(8, 16).unwrap();
        assert!(m.count() > 16 && m.count() < 100);
    }
}
