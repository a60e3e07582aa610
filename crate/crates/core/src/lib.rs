//! Core algorithms for quantile-binned subseasonal forecasting: grids and
//! latitude weighting, climatological quantile thresholds, ensemble
//! calibration, a small reverse-mode autodiff engine, the dual-head
//! stochastic forecaster, curriculum training, verification metrics and a
//! synthetic data generator.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod calendar;
pub mod calibration;
pub mod checks;
pub mod datagen;
pub mod climatology;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod grid;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
