//! Pipeline objects stored in a field catalog: the daily truth and land mask,
//! the calendar climatology, and ensemble forecast sets.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use qbin_core::climatology::CalendarClimatology;
use qbin_core::config::lead_day;
use qbin_core::datagen::{DRIVER, PRECIP};
use qbin_core::field::{FieldKey, GridField};
use qbin_core::grid::{LatLonGrid, SpatialMask};

use crate::fieldio::{Catalog, FieldIoError, Result};
use crate::pipeline::{ForecastSet, LeadForecast, World, DRIVER_UNITS, PRECIP_UNITS};

pub const LAND: &str = "land";
pub const CLIM_MEAN: &str = "clim_mean";
/// Forecast member weekly mean of the classified channel.
pub const FC_WEEKLY: &str = "fc_weekly_precip";
pub const FC_CHANNELS: [&str; 2] = ["fc_precip", "fc_driver"];

/// Calendar year used to key climatology fields.
const CLIM_YEAR: i32 = 2001;

fn land_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

pub fn prob_variable(bin: usize) -> String {
    format!("fc_prob_b{}", bin + 1)
}

pub fn clim_boundary_variable(b: usize) -> String {
    format!("clim_q{}", b + 1)
}

pub fn write_world(cat: &mut Catalog, world: &World) -> Result<()> {
    for (var, units, series) in [
        (PRECIP, PRECIP_UNITS, &world.precip),
        (DRIVER, DRIVER_UNITS, &world.driver),
    ] {
        for (i, day) in series.days().iter().enumerate() {
            let date = series.start() + chrono::Days::new(i as u64);
            cat.write(&GridField::new(
                var,
                units,
                world.grid.clone(),
                date,
                day.clone(),
            )?)?;
        }
    }
    let land = world
        .land
        .keep()
        .iter()
        .map(|k| f64::from(u8::from(*k)))
        .collect();
    cat.write(&GridField::new(
        LAND,
        "1",
        world.grid.clone(),
        land_date(),
        land,
    )?)
}

pub fn read_world(cat: &Catalog) -> Result<World> {
    let (first, last) = cat.date_span(PRECIP).ok_or_else(|| {
        FieldIoError::Catalog(format!("no {PRECIP} fields under {}", cat.root().display()))
    })?;
    let (precip, grid) = cat.daily_series(PRECIP, first, last)?;
    let (driver, dgrid) = cat.daily_series(DRIVER, first, last)?;
    if dgrid != grid {
        return Err(FieldIoError::Catalog("channels use different grids".into()));
    }
    let land = read_mask(cat, &grid)?;
    Ok(World::new(grid, precip, driver, land)?)
}

fn read_mask(cat: &Catalog, grid: &LatLonGrid) -> Result<SpatialMask> {
    let f = cat.read(&FieldKey::new(LAND, land_date(), 0, 0))?;
    if f.grid != *grid {
        return Err(FieldIoError::Catalog(
            "land mask uses a different grid".into(),
        ));
    }
    Ok(SpatialMask::from_keep(
        grid.n_lat(),
        grid.n_lon(),
        f.values.iter().map(|v| *v > 0.5).collect(),
    )?)
}

/// Boundaries and mean of every calendar day, keyed by a day of 2001.
pub fn write_climatology(
    cat: &mut Catalog,
    clim: &CalendarClimatology,
    grid: &LatLonGrid,
) -> Result<()> {
    let first = NaiveDate::from_ymd_opt(CLIM_YEAR, 1, 1).expect("valid date");
    for day in first.iter_days().take(365) {
        for (b, field) in clim
            .thresholds(day)
            .boundary_fields()
            .into_iter()
            .enumerate()
        {
            cat.write(&GridField::new(
                clim_boundary_variable(b),
                PRECIP_UNITS,
                grid.clone(),
                day,
                field,
            )?)?;
        }
        cat.write(&GridField::new(
            CLIM_MEAN,
            PRECIP_UNITS,
            grid.clone(),
            day,
            clim.mean(day).to_vec(),
        )?)?;
    }
    Ok(())
}

/// Every member's weekly mean, final-day channels and bin probabilities,
/// keyed by init date, lead day and member.
pub fn write_forecasts(cat: &mut Catalog, fc: &ForecastSet, grid: &LatLonGrid) -> Result<()> {
    for ((init, week), lf) in &fc.entries {
        let lead = lead_day(*week);
        for m in 0..fc.n_members {
            let put = |cat: &mut Catalog, var: &str, units: &str, values: Vec<f64>| {
                let f = GridField::new(var, units, grid.clone(), *init, values)?
                    .with_lead(lead)
                    .with_member(m as u32);
                cat.write(&f)
            };
            put(cat, FC_WEEKLY, PRECIP_UNITS, lf.member_weekly[m].clone())?;
            for (c, var) in FC_CHANNELS.iter().enumerate() {
                let units = if c == 0 { PRECIP_UNITS } else { DRIVER_UNITS };
                put(cat, var, units, lf.member_fields[m][c].clone())?;
            }
            let cells = grid.n_cells();
            for b in 0..fc.n_bins {
                put(
                    cat,
                    &prob_variable(b),
                    "1",
                    lf.member_probs[m][b * cells..(b + 1) * cells].to_vec(),
                )?;
            }
        }
    }
    Ok(())
}

/// Inverse of [`write_forecasts`]. Probabilities come back at file precision
/// and are renormalized per cell.
pub fn read_forecasts(cat: &Catalog, n_bins: usize) -> Result<ForecastSet> {
    let mut shape: BTreeMap<(NaiveDate, u32), u32> = BTreeMap::new();
    for k in cat.keys().filter(|k| k.variable == FC_WEEKLY) {
        let e = shape.entry((k.date, k.lead)).or_default();
        *e = (*e).max(k.member + 1);
    }
    if shape.is_empty() {
        return Err(FieldIoError::Catalog(format!(
            "no forecasts under {}",
            cat.root().display()
        )));
    }
    let n_members = *shape.values().next().expect("non-empty") as usize;
    let mut entries = BTreeMap::new();
    for (&(init, lead), &m) in &shape {
        if m as usize != n_members || lead % 7 != 0 {
            return Err(FieldIoError::Catalog(format!(
                "inconsistent forecast on {init} lead {lead}"
            )));
        }
        let mut lf = LeadForecast {
            member_fields: vec![],
            member_weekly: vec![],
            member_probs: vec![],
            mean_probs: vec![],
        };
        for member in 0..m {
            let get = |var: &str| {
                cat.read(&FieldKey::new(var, init, lead, member))
                    .map(|f| f.values)
            };
            lf.member_weekly.push(get(FC_WEEKLY)?);
            lf.member_fields
                .push(FC_CHANNELS.iter().map(|v| get(v)).collect::<Result<_>>()?);
            let mut probs = Vec::new();
            for b in 0..n_bins {
                probs.extend(get(&prob_variable(b))?);
            }
            let cells = probs.len() / n_bins;
            for c in 0..cells {
                let s: f64 = (0..n_bins).map(|b| probs[b * cells + c]).sum();
                (0..n_bins).for_each(|b| probs[b * cells + c] /= s);
            }
            lf.member_probs.push(probs);
        }
        let mut mean = vec![0.0; lf.member_probs[0].len()];
        for p in &lf.member_probs {
            mean.iter_mut()
                .zip(p)
                .for_each(|(a, v)| *a += v / n_members as f64);
        }
        lf.mean_probs = mean;
        entries.insert((init, lead / 7), lf);
    }
    let inits: Vec<NaiveDate> = {
        let mut v: Vec<_> = entries.keys().map(|(d, _)| *d).collect();
        v.dedup();
        v
    };
    let mut lead_weeks: Vec<u32> = entries.keys().map(|(_, w)| *w).collect();
    lead_weeks.sort_unstable();
    lead_weeks.dedup();
    for d in &inits {
        for w in &lead_weeks {
            if !entries.contains_key(&(*d, *w)) {
                return Err(FieldIoError::Catalog(format!(
                    "forecast for {d} week {w} is missing"
                )));
            }
        }
    }
    Ok(ForecastSet {
        n_members,
        n_bins,
        lead_weeks,
        inits,
        entries,
    })
}
