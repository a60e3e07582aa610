//! Finite-difference gradient suite over the autodiff primitives, every loss
//! term, the weighted total and the end-to-end one-step training objective
//! of a small forecaster (4x8 grid, two channels, five bins).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::climatology::CategoryLabel;
use crate::error::Result;
use crate::grid::{latitude_weights, LatLonGrid, LatWeights};
use crate::losses::{ce_loss, charbonnier_loss, kl_diag_gaussians, one_hot, rps_loss, total_objective, LossWeights};
use crate::model::{Forecaster, ModelConfig, RolloutMode, StateWindow, TemporalConditioning};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-4;
const N_LAT: usize = 4;
const N_LON: usize = 8;
const N_BINS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub outcomes: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn worst(&self) -> Option<&CheckOutcome> {
        self.outcomes.iter().max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            s.push_str(&format!(
                "{:<12} seed {:>2}  max rel {:.3e}  {} entries  {}\n",
                o.name,
                o.seed,
                o.report.max_rel_error,
                o.report.entries_checked,
                if o.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Configuration of the small model used by the end-to-end check.
pub fn check_model_config() -> ModelConfig {
    ModelConfig { width: 4, cond_hidden: 4, n_blocks: 2, log_sigma_init: 0.0, ..ModelConfig::default() }
}

fn check_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 5).expect("valid date")
}

/// One-step training objective on a fixed window: posterior perturbation,
/// forward pass, Charbonnier + RPS + CE + KL. The KL weight is raised so its
/// gradient stays well above roundoff.
pub fn end_to_end_objective(
    m: &Forecaster,
    t: &mut Tape,
    s: &ParamStore,
    w: &StateWindow,
    noise: &Tensor,
    target: &Tensor,
    labels: &Tensor,
) -> Result<Var> {
    let (nl, nw) = m.grid_dims();
    let alpha = latitude_weights(&LatLonGrid::cell_centered(nl, nw)?)?;
    let prev = t.constant(w.prev.clone())?;
    let cur = t.constant(w.cur.clone())?;
    let next = match &w.next {
        Some(n) => Some(t.constant(n.clone())?),
        None => None,
    };
    let pert = m.perturb(t, s, RolloutMode::Train, prev, cur, next, noise.clone())?;
    let out = m.forward(t, s, prev, pert.state, &TemporalConditioning::new(1, crate::calendar::add_days(w.date, 1)))?;
    let y = t.constant(target.clone())?;
    let q = t.constant(labels.clone())?;
    let reg = charbonnier_loss(t, out.y, y, &alpha, 1e-3)?;
    let rps = rps_loss(t, out.probs, q, &alpha)?;
    let ce = ce_loss(t, out.probs, q, &alpha)?;
    let post = pert.posterior.expect("training mode has a posterior");
    let kl = kl_diag_gaussians(t, post.mu, post.log_sigma, pert.prior.mu, pert.prior.log_sigma)?;
    let weights = LossWeights { kl: 0.5, ..LossWeights::default() };
    Ok(total_objective(t, Some(reg), Some(rps), Some(ce), Some(kl), &weights)?.expect("all terms present"))
}

fn random_labels(rng: &mut ChaCha8Rng, cells: usize) -> Vec<CategoryLabel> {
    (0..cells).map(|_| CategoryLabel(rng.random_range(1..=N_BINS as u8))).collect()
}

fn outcome(name: &'static str, seed: u64, report: GradCheckReport, tol: f64) -> CheckOutcome {
    let passed = report.max_rel_error <= tol;
    CheckOutcome { name, seed, report, passed }
}

fn primitives(seed: u64, tol: f64) -> Result<CheckOutcome> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.add("x", Tensor::randn(&[2, N_LAT, N_LON], 1.0, &mut r));
    store.add("w", Tensor::randn(&[3, 2, 3, 3], 0.3, &mut r));
    store.add("b", Tensor::randn(&[3], 0.3, &mut r));
    store.add("m", Tensor::randn(&[3, 2], 0.5, &mut r));
    store.add("v", Tensor::randn(&[2, 1], 0.5, &mut r));
    store.add("s", Tensor::randn(&[1], 0.3, &mut r));
    let noise = Tensor::randn(&[3, N_LAT, N_LON], 1.0, &mut r);
    let report = grad_check(
        |t, s| {
            let v: Vec<Var> = s.ids().map(|id| t.param(s, id)).collect::<Result<_>>()?;
            let h = t.conv2d(v[0], v[1], Some(v[2]))?;
            let h = t.gelu(h)?;
            let mv = t.matmul(v[3], v[4])?;
            let mv = t.reshape(mv, &[3])?;
            let sc = t.narrow(mv, 0, 0, 3)?;
            let sh = t.mul_const(sc, 0.5)?;
            let h = t.scale_shift(h, sc, sh)?;
            let e = t.exp(v[5])?;
            let h = t.div_scalar(h, e)?;
            let p = t.softmax(h, 0)?;
            let c = t.cumsum(p, 0)?;
            let l = t.log(c, 1e-12)?;
            let z = t.gaussian_sample(h, h, noise.clone())?;
            let z = t.mul_const(z, 0.01)?;
            let sq = t.mul(z, z)?;
            let sq = t.add_const(sq, 1.0)?;
            let sq = t.sqrt(sq)?;
            let both = t.concat(&[l, sq], 0)?;
            let red = t.sum_axis(both, 1)?;
            let a = t.mean(red)?;
            let b = t.sum(v[0])?;
            let b = t.mul_scalar(b, e)?;
            let d = t.div(a, b)?;
            let out = t.add(a, d)?;
            let out = t.sub(out, b)?;
            t.sum(out)
        },
        &mut store,
        DEFAULT_STEP,
    )?;
    Ok(outcome("primitives", seed, report, tol))
}

fn loss_store(r: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    store.add("pred", Tensor::randn(&[2, N_LAT, N_LON], 1.0, r));
    store.add("logits", Tensor::randn(&[N_BINS, N_LAT, N_LON], 1.0, r));
    store.add("mu_q", Tensor::randn(&[2, N_LAT, N_LON], 1.0, r));
    store.add("ls_q", Tensor::randn(&[2, N_LAT, N_LON], 0.5, r));
    store.add("mu_p", Tensor::randn(&[2, N_LAT, N_LON], 1.0, r));
    store.add("ls_p", Tensor::randn(&[2, N_LAT, N_LON], 0.5, r));
    store
}

fn losses(seed: u64, tol: f64, alpha: &LatWeights) -> Result<Vec<CheckOutcome>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let mut store = loss_store(&mut r);
    let labels = random_labels(&mut r, N_LAT * N_LON);
    let oh = one_hot(&labels, N_BINS, N_LAT, N_LON)?;
    let target = Tensor::randn(&[2, N_LAT, N_LON], 1.0, &mut r);
    let mut out = Vec::new();

    // Each term is built from the same parameter set; unused parameters get
    // zero analytic and numeric gradients.
    let build = |which: &'static str| {
        let oh = oh.clone();
        let target = target.clone();
        move |t: &mut Tape, s: &ParamStore| -> Result<Var> {
            let v: Vec<Var> = s.ids().map(|id| t.param(s, id)).collect::<Result<_>>()?;
            let y = t.constant(target.clone())?;
            let p = t.softmax(v[1], 0)?;
            let q = t.constant(oh.clone())?;
            match which {
                "charbonnier" => charbonnier_loss(t, v[0], y, alpha, 1e-3),
                "ce" => ce_loss(t, p, q, alpha),
                "rps" => rps_loss(t, p, q, alpha),
                "kl" => kl_diag_gaussians(t, v[2], v[3], v[4], v[5]),
                _ => {
                    let reg = charbonnier_loss(t, v[0], y, alpha, 1e-3)?;
                    let rps = rps_loss(t, p, q, alpha)?;
                    let ce = ce_loss(t, p, q, alpha)?;
                    let kl = kl_diag_gaussians(t, v[2], v[3], v[4], v[5])?;
                    let w = LossWeights { kl: 0.5, ..LossWeights::default() };
                    Ok(total_objective(t, Some(reg), Some(rps), Some(ce), Some(kl), &w)?.expect("all terms present"))
                }
            }
        }
    };
    for name in ["charbonnier", "ce", "rps", "kl", "total"] {
        let report = grad_check(build(name), &mut store, DEFAULT_STEP)?;
        out.push(outcome(name, seed, report, tol));
    }
    Ok(out)
}

fn end_to_end(seed: u64, tol: f64) -> Result<CheckOutcome> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let (m, mut store) = Forecaster::new(check_model_config(), N_LAT, N_LON, &mut r)?;
    // Move off the zero-initialized heads so every path carries gradient.
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value.add_scaled(&Tensor::randn(&shape, 0.2, &mut r), 1.0)?;
    }
    let shape = m.state_shape();
    let window = StateWindow {
        prev: Tensor::randn(&shape, 1.0, &mut r),
        cur: Tensor::randn(&shape, 1.0, &mut r),
        next: Some(Tensor::randn(&shape, 1.0, &mut r)),
        date: check_date(),
    };
    let noise = Tensor::randn(&shape, 1.0, &mut r);
    let labels = one_hot(&random_labels(&mut r, N_LAT * N_LON), N_BINS, N_LAT, N_LON)?;
    let target = Tensor::randn(&shape, 1.0, &mut r);
    let report = grad_check(
        |t, s| end_to_end_objective(&m, t, s, &window, &noise, &target, &labels),
        &mut store,
        DEFAULT_STEP,
    )?;
    Ok(outcome("end_to_end", seed, report, tol))
}

/// Runs every check for each seed.
pub fn gradient_suite(seeds: &[u64], tolerance: f64) -> Result<SuiteReport> {
    let alpha = latitude_weights(&LatLonGrid::cell_centered(N_LAT, N_LON)?)?;
    let mut outcomes = Vec::new();
    for &seed in seeds {
        outcomes.push(primitives(seed, tolerance)?);
        outcomes.extend(losses(seed, tolerance, &alpha)?);
        outcomes.push(end_to_end(seed, tolerance)?);
    }
    Ok(SuiteReport { tolerance, outcomes })
}
