//! Independent oracles for the scoring rules, quantile estimator and
//! initialization calendar, exercised through the public API.

use chrono::{Datelike, NaiveDate, Weekday};
use qbin_core::calendar::{initialization_dates, sample_dates, CLIMATOLOGY_OFFSETS};
use qbin_core::climatology::{quantile_thresholds, quintile_thresholds, CategoryLabel, ClimSampleSet};
use qbin_core::grid::LatWeights;
use qbin_core::losses::{ce_loss, one_hot, rps_loss};
use qbin_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: usize = 5;

/// Brute-force ranked probability score: double sum over bins.
fn rps_brute(p: &[f64], obs: usize) -> f64 {
    (0..p.len())
        .map(|k| {
            let fc: f64 = (0..=k).map(|j| p[j]).sum();
            let ob: f64 = (0..=k).map(|j| if j == obs { 1.0 } else { 0.0 }).sum();
            (fc - ob) * (fc - ob)
        })
        .sum()
}

fn random_simplex(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..K).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Evaluates the per-cell loss on a single-cell grid.
fn cell_loss(probs: &[f64], label: u8, ce: bool) -> f64 {
    let mut t = Tape::new();
    let p = t.constant(Tensor::new(&[K, 1, 1], probs.to_vec()).unwrap()).unwrap();
    let q = t.constant(one_hot(&[CategoryLabel(label)], K, 1, 1).unwrap()).unwrap();
    let alpha = LatWeights::uniform(1);
    let l = if ce { ce_loss(&mut t, p, q, &alpha) } else { rps_loss(&mut t, p, q, &alpha) }.unwrap();
    t.value(l).item()
}

#[test]
fn rps_matches_brute_force_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let p = random_simplex(&mut rng);
        let label = rng.random_range(1..=K as u8);
        let got = cell_loss(&p, label, false);
        worst = worst.max((got - rps_brute(&p, label as usize - 1)).abs());
    }
    assert!(worst <= 1e-12, "max deviation {worst}");
}

#[test]
fn uniform_forecast_scores() {
    let u = vec![0.2; K];
    assert!((cell_loss(&u, 3, false) - 0.40).abs() < 1e-15);
    assert!((cell_loss(&u, 1, false) - 1.20).abs() < 1e-15);
    assert!((cell_loss(&u, 4, true) - 5f64.ln()).abs() < 1e-9);
}

/// Sort-and-interpolate oracle at probability `p`, numpy's default rule.
fn oracle_quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (pos - i as f64) * (v[i + 1] - v[i])
}

#[test]
fn quintiles_match_sort_and_interpolate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let n = rng.random_range(5..200);
        let sample: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 50.0 - 10.0).collect();
        let thr = quintile_thresholds(&ClimSampleSet::from_cell_samples(vec![sample.clone()]).unwrap()).unwrap();
        let b = thr.cell(0);
        for (k, q) in b.iter().enumerate() {
            let want = oracle_quantile(&sample, (k + 1) as f64 / 5.0);
            assert!((q - want).abs() <= 1e-12 * want.abs().max(1.0), "trial {trial} bound {k}: {q} vs {want}");
        }
        assert!(b.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn one_to_hundred_gives_q20_of_20_8() {
    let s: Vec<f64> = (1..=100).map(f64::from).collect();
    let thr = quantile_thresholds(&ClimSampleSet::from_cell_samples(vec![s]).unwrap(), 5).unwrap();
    assert_eq!(thr.cell(0)[0], 20.8);
}

#[test]
fn one_year_has_104_monday_thursday_inits() {
    let dates = initialization_dates(2022).unwrap();
    assert_eq!(dates.len(), 104);
    assert!(dates.iter().all(|d| matches!(d.weekday(), Weekday::Mon | Weekday::Thu) && d.year() == 2022));
    assert!(dates.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn twenty_years_and_five_offsets_give_100_samples() {
    let years: Vec<i32> = (2002..=2021).collect();
    let target = NaiveDate::from_ymd_opt(2022, 3, 1).unwrap();
    let dates = sample_dates(target, &years, &CLIMATOLOGY_OFFSETS);
    assert_eq!(dates.len(), 100);
    let mut unique = dates.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), 100);
}
