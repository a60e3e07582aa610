//! Calendar arithmetic on real dates: day-of-year, same-calendar-day lookup
//! across years, and the twice-weekly initialization calendar.

use alloc::vec::Vec;
use chrono::{Datelike, Days, NaiveDate, Weekday};

use crate::error::{Error, Result};

/// Offsets (days) around the target calendar day used to build climatological
/// samples.
pub const CLIMATOLOGY_OFFSETS: [i64; 5] = [-4, -2, 0, 2, 4];

pub fn add_days(date: NaiveDate, days: i64) -> NaiveDate {
    if days >= 0 {
        date.checked_add_days(Days::new(days as u64))
    } else {
        date.checked_sub_days(Days::new(days.unsigned_abs()))
    }
    .expect("date arithmetic overflow")
}

/// Signed number of days from `from` to `to`.
pub fn days_between(from: NaiveDate, to: NaiveDate) -> i64 {
    to.signed_duration_since(from).num_days()
}

/// The same month/day as `date` in `year`. Feb 29 maps to Feb 28 in common years.
pub fn same_calendar_day(date: NaiveDate, year: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(year, date.month(), date.day())
        .or_else(|| NaiveDate::from_ymd_opt(year, date.month(), date.day() - 1))
        .expect("valid calendar day")
}

/// Dates of the climatological sample set for `target`: one per (year, offset).
/// Offsets are applied after moving the target's calendar day into each year, so
/// they wrap across year boundaries.
pub fn sample_dates(target: NaiveDate, years: &[i32], offsets: &[i64]) -> Vec<NaiveDate> {
    years
        .iter()
        .flat_map(|&y| {
            let anchor = same_calendar_day(target, y);
            offsets.iter().map(move |&o| add_days(anchor, o))
        })
        .collect()
}

/// Periodic day-of-year encoding `(sin, cos)` of `2 pi doy / 365.25`.
pub fn periodic_day_of_year(date: NaiveDate) -> (f64, f64) {
    let angle = 2.0 * core::f64::consts::PI * date.ordinal() as f64 / 365.25;
    (libm::sin(angle), libm::cos(angle))
}

/// All Mondays and Thursdays of `year`.
pub fn initialization_dates(year: i32) -> Result<Vec<NaiveDate>> {
    let start = NaiveDate::from_ymd_opt(year, 1, 1)
        .ok_or_else(|| Error::Validation(alloc::format!("year {year} out of range")))?;
    Ok(start
        .iter_days()
        .take_while(|d| d.year() == year)
        .filter(|d| matches!(d.weekday(), Weekday::Mon | Weekday::Thu))
        .collect())
}

/// Inclusive list of years.
pub fn year_list(first: i32, last: i32) -> Vec<i32> {
    (first..=last).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn twice_weekly_calendar_has_104_dates_in_2022() {
        let dates = initialization_dates(2022).unwrap();
        assert_eq!(dates.len(), 104);
        assert_eq!(dates[0], d(2022, 1, 3));
        assert_eq!(dates[1], d(2022, 1, 6));
    }

    #[test]
    fn offsets_wrap_into_previous_year() {
        let dates = sample_dates(d(2022, 1, 2), &[2003], &[-4]);
        assert_eq!(dates, [d(2002, 12, 29)]);
    }

    #[test]
    fn twenty_years_five_offsets() {
        let years = year_list(2002, 2021);
        assert_eq!(sample_dates(d(2022, 6, 1), &years, &CLIMATOLOGY_OFFSETS).len(), 100);
    }

    #[test]
    fn leap_day_maps_to_feb_28() {
        assert_eq!(same_calendar_day(d(2020, 2, 29), 2021), d(2021, 2, 28));
        assert_eq!(same_calendar_day(d(2020, 2, 29), 2024), d(2024, 2, 29));
    }

    #[test]
    fn periodic_encoding_is_on_unit_circle() {
        for day in d(2020, 1, 1).iter_days().take(366) {
            let (s, c) = periodic_day_of_year(day);
            assert!((s * s + c * c - 1.0).abs() < 1e-9);
        }
    }
}
