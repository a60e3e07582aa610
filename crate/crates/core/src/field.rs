//! Grid fields and in-memory field archives.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use chrono::NaiveDate;

use crate::calendar::{add_days, days_between};
use crate::error::{Error, Result};
use crate::grid::LatLonGrid;

/// One variable on a lat-lon grid at one date, values row-major `[lat, lon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub variable: String,
    pub units: String,
    pub grid: LatLonGrid,
    pub date: NaiveDate,
    pub lead: u32,
    pub member: u32,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(
        variable: impl Into<String>,
        units: impl Into<String>,
        grid: LatLonGrid,
        date: NaiveDate,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        Ok(Self {
            variable: variable.into(),
            units: units.into(),
            grid,
            date,
            lead: 0,
            member: 0,
            values,
        })
    }

    pub fn with_lead(mut self, lead: u32) -> Self {
        self.lead = lead;
        self
    }

    pub fn with_member(mut self, member: u32) -> Self {
        self.member = member;
        self
    }

    pub fn key(&self) -> FieldKey {
        FieldKey {
            variable: self.variable.clone(),
            date: self.date,
            lead: self.lead,
            member: self.member,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldKey {
    pub variable: String,
    pub date: NaiveDate,
    pub lead: u32,
    pub member: u32,
}

impl FieldKey {
    pub fn new(variable: impl Into<String>, date: NaiveDate, lead: u32, member: u32) -> Self {
        Self { variable: variable.into(), date, lead, member }
    }
}

/// Keyed collection of fields; keys are unique.
#[derive(Debug, Clone, Default)]
pub struct FieldArchive {
    fields: BTreeMap<FieldKey, GridField>,
}

impl FieldArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a field; a duplicate key is an error.
    pub fn insert(&mut self, field: GridField) -> Result<()> {
        let key = field.key();
        if self.fields.contains_key(&key) {
            return Err(Error::Validation(format!(
                "duplicate archive key {} {} lead {} member {}",
                key.variable, key.date, key.lead, key.member
            )));
        }
        self.fields.insert(key, field);
        Ok(())
    }

    pub fn get(&self, key: &FieldKey) -> Result<&GridField> {
        self.fields.get(key).ok_or_else(|| {
            Error::MissingData(format!(
                "{} on {} (lead {}, member {})",
                key.variable, key.date, key.lead, key.member
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FieldKey, &GridField)> {
        self.fields.iter()
    }

    /// Dense daily series of one variable (lead 0, member 0) over `[first, last]`.
    pub fn daily_series(&self, variable: &str, first: NaiveDate, last: NaiveDate) -> Result<DailySeries> {
        let n = days_between(first, last) + 1;
        if n <= 0 {
            return Err(Error::Empty("empty date range".into()));
        }
        let mut values = Vec::with_capacity(n as usize);
        let mut n_cells = None;
        for k in 0..n {
            let date = add_days(first, k);
            let f = self.get(&FieldKey::new(variable, date, 0, 0))?;
            n_cells.get_or_insert(f.values.len());
            values.push(f.values.clone());
        }
        DailySeries::new(first, n_cells.unwrap_or(0), values)
    }
}

/// Contiguous daily sequence of per-cell values (any number of values per day).
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    start: NaiveDate,
    width: usize,
    days: Vec<Vec<f64>>,
}

impl DailySeries {
    pub fn new(start: NaiveDate, width: usize, days: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = days.iter().position(|d| d.len() != width) {
            return Err(Error::ShapeMismatch(format!(
                "day {bad} has {} values, expected {width}",
                days[bad].len()
            )));
        }
        Ok(Self { start, width, days })
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        add_days(self.start, self.days.len() as i64 - 1)
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    /// Values per day.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let k = days_between(self.start, date);
        (k >= 0 && (k as usize) < self.days.len()).then_some(k as usize)
    }

    pub fn get(&self, date: NaiveDate) -> Option<&[f64]> {
        self.index_of(date).map(|k| self.days[k].as_slice())
    }

    pub fn require(&self, date: NaiveDate, what: &str) -> Result<&[f64]> {
        self.get(date)
            .ok_or_else(|| Error::MissingData(format!("{what} on {date} (archive gap)")))
    }

    pub fn day(&self, index: usize) -> &[f64] {
        &self.days[index]
    }

    pub fn days(&self) -> &[Vec<f64>] {
        &self.days
    }

    /// Extracts values `[offset, offset + len)` of every day (e.g. one channel).
    pub fn slice_values(&self, offset: usize, len: usize) -> Result<DailySeries> {
        if offset + len > self.width {
            return Err(Error::ShapeMismatch("slice exceeds day width".into()));
        }
        let days = self.days.iter().map(|d| d[offset..offset + len].to_vec()).collect();
        DailySeries::new(self.start, len, days)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_rejects_duplicates_and_reports_gaps() {
        let grid = LatLonGrid::cell_centered(1, 2).unwrap();
        let date = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let f = GridField::new("tp", "mm", grid, date, alloc::vec![1.0, 2.0]).unwrap();
        let mut a = FieldArchive::new();
        a.insert(f.clone()).unwrap();
        assert!(a.insert(f).is_err());
        let next = add_days(date, 1);
        let err = a.daily_series("tp", date, next).unwrap_err();
        assert!(matches!(err, Error::MissingData(msg) if msg.contains("2020-01-02")));
    }
}
