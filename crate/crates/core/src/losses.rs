//! Training losses on the tape, plus plain `f64` per-cell versions shared with
//! the verification code.
//!
//! Every spatial loss is a latitude-weighted mean over cells:
//! `(1 / (C H W)) * sum alpha_i * term`, with `C` the channel count of that
//! loss (all state channels for regression, one classified channel for the
//! probabilistic losses).

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::climatology::CategoryLabel;
use crate::error::{Error, Result};
use crate::grid::LatWeights;
use crate::tensor::{Tape, Tensor, Var, LOG_SIGMA_MAX, LOG_SIGMA_MIN};

/// Probability floor inside the cross-entropy logarithm.
pub const CE_LOG_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-6;

/// Weights of the joint objective `reg + rps * RPS + ce * CE + kl * KL`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rps: f64,
    pub ce: f64,
    pub kl: f64,
    /// Charbonnier smoothing in normalized units.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rps: 0.5, ce: 0.1, kl: 5e-4, epsilon: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.rps) && ok(self.ce) && ok(self.kl)) {
            return Err(Error::Validation(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Validation(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Values of the four loss terms and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reg: f64,
    pub rps: f64,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn from_terms(reg: f64, rps: f64, ce: f64, kl: f64, w: &LossWeights) -> Self {
        Self { reg, rps, ce, kl, total: total_value(reg, rps, ce, kl, w) }
    }

    /// Adds `scale * other` termwise.
    pub fn accumulate(&mut self, other: &LossComponents, scale: f64) {
        self.reg += scale * other.reg;
        self.rps += scale * other.rps;
        self.ce += scale * other.ce;
        self.kl += scale * other.kl;
        self.total += scale * other.total;
    }
}

pub fn total_value(reg: f64, rps: f64, ce: f64, kl: f64, w: &LossWeights) -> f64 {
    reg + w.rps * rps + w.ce * ce + w.kl * kl
}

/// Latitude weight of every element of a `[C, H, W]` field.
pub fn weight_field(alpha: &LatWeights, channels: usize, n_lon: usize) -> Result<Tensor> {
    let per_cell = alpha.per_cell(n_lon);
    let mut data = Vec::with_capacity(channels * per_cell.len());
    for _ in 0..channels {
        data.extend_from_slice(&per_cell);
    }
    Tensor::new(&[channels, alpha.n_lat(), n_lon], data)
}

fn weighted_mean_on_tape(tape: &mut Tape, per_elem: Var, alpha: &LatWeights) -> Result<Var> {
    let shape = tape.shape(per_elem).to_vec();
    let (c, w) = match shape.as_slice() {
        [h, w] if *h == alpha.n_lat() => (1, *w),
        [c, h, w] if *h == alpha.n_lat() => (*c, *w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "field {shape:?} does not match {} latitude rows",
                alpha.n_lat()
            )))
        }
    };
    let weights = weight_field(alpha, c, w)?.reshaped(&shape)?;
    let wv = tape.constant(weights)?;
    let weighted = tape.mul(per_elem, wv)?;
    tape.mean(weighted)
}

/// `(1/CHW) sum alpha_i sqrt((pred - target)^2 + eps^2)` over `[C, H, W]`.
pub fn charbonnier_loss(tape: &mut Tape, pred: Var, target: Var, alpha: &LatWeights, eps: f64) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let d2 = tape.mul(d, d)?;
    let d2 = tape.add_const(d2, eps * eps)?;
    let r = tape.sqrt(d2)?;
    weighted_mean_on_tape(tape, r, alpha)
}

/// Checks that `probs` and `onehot` are `[K, H, W]` with simplex cells and a
/// single 1 per cell of the target.
fn check_categorical(tape: &Tape, probs: Var, onehot: Var) -> Result<()> {
    let (p, q) = (tape.value(probs), tape.value(onehot));
    if p.shape() != q.shape() || p.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!("probs {:?} vs target {:?}", p.shape(), q.shape())));
    }
    let k = p.shape()[0];
    let cells = p.numel() / k;
    for c in 0..cells {
        let (mut ones, mut total) = (0, 0.0);
        for b in 0..k {
            let t = q.data()[b * cells + c];
            if t == 1.0 {
                ones += 1;
            } else if t != 0.0 {
                return Err(Error::MalformedOneHot(format!("cell {c} has entry {t}")));
            }
            total += p.data()[b * cells + c];
        }
        if ones != 1 {
            return Err(Error::MalformedOneHot(format!("cell {c} has {ones} hot bins")));
        }
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("probabilities at cell {c} sum to {total}")));
        }
    }
    Ok(())
}

/// Latitude-weighted mean of `-sum_l Q_l ln max(Qhat_l, 1e-12)`.
pub fn ce_loss(tape: &mut Tape, probs: Var, onehot: Var, alpha: &LatWeights) -> Result<Var> {
    check_categorical(tape, probs, onehot)?;
    let logp = tape.log(probs, CE_LOG_FLOOR)?;
    let prod = tape.mul(logp, onehot)?;
    let per_cell = tape.sum_axis(prod, 0)?;
    let per_cell = tape.mul_const(per_cell, -1.0)?;
    weighted_mean_on_tape(tape, per_cell, alpha)
}

/// Latitude-weighted mean of `sum_k (cumsum(Qhat)_k - cumsum(Q)_k)^2`.
pub fn rps_loss(tape: &mut Tape, probs: Var, onehot: Var, alpha: &LatWeights) -> Result<Var> {
    check_categorical(tape, probs, onehot)?;
    let d = tape.sub(probs, onehot)?;
    let cd = tape.cumsum(d, 0)?;
    let sq = tape.mul(cd, cd)?;
    let per_cell = tape.sum_axis(sq, 0)?;
    weighted_mean_on_tape(tape, per_cell, alpha)
}

/// Mean over elements of `KL(N(mu_q, s_q^2) || N(mu_p, s_p^2))` with both
/// log standard deviations clamped to the engine's range.
pub fn kl_diag_gaussians(tape: &mut Tape, mu_q: Var, ls_q: Var, mu_p: Var, ls_p: Var) -> Result<Var> {
    let ls_q = tape.clamp(ls_q, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let ls_p = tape.clamp(ls_p, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let log_ratio = tape.sub(ls_p, ls_q)?;
    let two_q = tape.mul_const(ls_q, 2.0)?;
    let var_q = tape.exp(two_q)?;
    let dm = tape.sub(mu_q, mu_p)?;
    let dm2 = tape.mul(dm, dm)?;
    let num = tape.add(var_q, dm2)?;
    let two_p = tape.mul_const(ls_p, 2.0)?;
    let var_p = tape.exp(two_p)?;
    let var_p2 = tape.mul_const(var_p, 2.0)?;
    let frac = tape.div(num, var_p2)?;
    let s = tape.add(log_ratio, frac)?;
    let s = tape.add_const(s, -0.5)?;
    tape.mean(s)
}

/// `reg + w.rps * rps + w.ce * ce + w.kl * kl` on the tape. Missing terms are
/// skipped.
pub fn total_objective(
    tape: &mut Tape,
    reg: Option<Var>,
    rps: Option<Var>,
    ce: Option<Var>,
    kl: Option<Var>,
    w: &LossWeights,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = reg;
    for (term, weight) in [(rps, w.rps), (ce, w.ce), (kl, w.kl)] {
        if let Some(t) = term {
            let scaled = tape.mul_const(t, weight)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
    }
    Ok(acc)
}

/// `[K, H, W]` one-hot field from per-cell labels.
pub fn one_hot(labels: &[CategoryLabel], n_bins: usize, n_lat: usize, n_lon: usize) -> Result<Tensor> {
    let cells = n_lat * n_lon;
    if labels.len() != cells {
        return Err(Error::ShapeMismatch(format!("{} labels for {cells} cells", labels.len())));
    }
    let mut data = alloc::vec![0.0; n_bins * cells];
    for (c, l) in labels.iter().enumerate() {
        if l.0 == 0 || l.index() >= n_bins {
            return Err(Error::MalformedOneHot(format!("label {} outside 1..={n_bins}", l.0)));
        }
        data[l.index() * cells + c] = 1.0;
    }
    Tensor::new(&[n_bins, n_lat, n_lon], data)
}

/// Ranked probability score of one categorical forecast against an observed bin.
pub fn rps_cell(probs: &[f64], label: CategoryLabel) -> f64 {
    let obs = label.index();
    let mut cum = 0.0;
    let mut total = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        let cum_obs = if k >= obs { 1.0 } else { 0.0 };
        total += (cum - cum_obs) * (cum - cum_obs);
    }
    total
}

/// Cross-entropy of one categorical forecast against an observed bin.
pub fn ce_cell(probs: &[f64], label: CategoryLabel) -> f64 {
    -libm::log(probs[label.index()].max(CE_LOG_FLOOR))
}

/// Closed-form KL divergence between two univariate Gaussians.
pub fn kl_gaussian(mu_q: f64, log_sigma_q: f64, mu_p: f64, log_sigma_p: f64) -> f64 {
    let (sq, sp) = (libm::exp(log_sigma_q), libm::exp(log_sigma_p));
    log_sigma_p - log_sigma_q + (sq * sq + (mu_q - mu_p) * (mu_q - mu_p)) / (2.0 * sp * sp) - 0.5
}
