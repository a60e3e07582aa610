//! Dual-head stochastic forecaster.
//!
//! One step maps a window `{X^{t-1}, X^t}` of normalized `[C, H, W]` states to
//! a regression field `Yhat` (the next state) and `K` bin probabilities for the
//! classified channel. The layout:
//!
//! ```text
//! H0 = conv(concat(prev, cur))                      shallow skip feature
//! H  = H0 + sum of residual blocks gelu(conv(mod(H)))
//! F  = concat(H, H0)
//! Yhat   = conv(mod(F))                             zero-initialized
//! logits = conv(mod(F)) / max(tau, tau_min)         zero-initialized
//! ```
//!
//! `mod` is a per-channel scale-shift driven by an MLP over the rollout step
//! and the periodic day of year. Two encoders with identical layout produce
//! Gaussian perturbation parameters: the prior from `{X^{t-1}, X^t}`, the
//! posterior from `{X^t, X^{t+1}}`. A perturbation is drawn once per rollout,
//! added to `X^t`, and the rollout then feeds its own regression output back.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::{add_days, periodic_day_of_year};
use crate::error::{Error, Result};
use crate::field::DailySeries;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var, LOG_SIGMA_MAX, LOG_SIGMA_MIN};

/// Any normalized state value beyond this aborts a rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub n_bins: usize,
    /// Channel whose bins the probabilistic head predicts.
    pub classified_channel: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub cond_hidden: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    /// Initial bias of both encoders' log-sigma output.
    pub log_sigma_init: f64,
    /// Rollout step divisor in the conditioning input.
    pub step_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            n_bins: 5,
            classified_channel: 0,
            width: 32,
            n_blocks: 2,
            cond_hidden: 16,
            tau_init: 1.0,
            tau_min: 0.05,
            log_sigma_init: -2.0,
            step_scale: 42.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.channels == 0 || self.classified_channel >= self.channels {
            return bad(format!("classified channel {} of {}", self.classified_channel, self.channels));
        }
        if self.n_bins < 2 {
            return bad(format!("need at least 2 bins, got {}", self.n_bins));
        }
        if self.width == 0 || self.cond_hidden == 0 {
            return bad("width and cond_hidden must be positive".into());
        }
        if !(self.tau_min > 0.0 && self.tau_init >= self.tau_min) {
            return bad(format!("tau_init {} must be >= tau_min {} > 0", self.tau_init, self.tau_min));
        }
        if !(LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&self.log_sigma_init) {
            return bad(format!("log_sigma_init {} outside the clamp range", self.log_sigma_init));
        }
        if !(self.step_scale > 0.0) {
            return bad("step_scale must be positive".into());
        }
        Ok(())
    }
}

/// Rollout step and periodic day of year of the step's valid date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalConditioning {
    pub step: usize,
    pub doy_sin: f64,
    pub doy_cos: f64,
}

impl TemporalConditioning {
    pub fn new(step: usize, valid_date: NaiveDate) -> Self {
        let (doy_sin, doy_cos) = periodic_day_of_year(valid_date);
        Self { step, doy_sin, doy_cos }
    }
}

/// First and last evaluated lead day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonSpec {
    pub first: usize,
    pub last: usize,
}

impl HorizonSpec {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first == 0 || first > last {
            return Err(Error::Validation(format!("horizon {first}..={last} must satisfy 1 <= first <= last")));
        }
        Ok(Self { first, last })
    }
}

/// Gaussian perturbation parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Gaussian perturbation parameters as values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFieldParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

/// One step's outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DualHeadVars {
    pub y: Var,
    pub logits: Var,
    pub probs: Var,
}

/// One step's outputs as values. `logits` are already divided by `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadOutput {
    pub y: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    pub tau: f64,
}

impl DualHeadOutput {
    fn from_tape(tape: &Tape, v: &DualHeadVars, tau: f64) -> Self {
        Self {
            y: tape.value(v.y).clone(),
            logits: tape.value(v.logits).clone(),
            probs: tape.value(v.probs).clone(),
            tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Perturbation from the posterior, which also sees `X^{t+1}`.
    Train,
    /// Perturbation from the prior.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    Prior,
    Posterior,
}

/// Two consecutive normalized states, plus the following one when known.
#[derive(Debug, Clone, PartialEq)]
pub struct StateWindow {
    pub prev: Tensor,
    pub cur: Tensor,
    pub next: Option<Tensor>,
    /// Date of `cur`.
    pub date: NaiveDate,
}

/// Result of perturbing the initial state on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation {
    pub state: Var,
    pub prior: GaussianVars,
    pub posterior: Option<GaussianVars>,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub perturbed: Tensor,
    pub outputs: Vec<DualHeadOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EncoderIds {
    hidden: ConvIds,
    mu: ConvIds,
    log_sigma: ConvIds,
}

#[derive(Debug, Clone, PartialEq)]
struct ModulationSlices {
    /// Offsets into the conditioning vector: (scale, shift) per block then
    /// per head.
    blocks: Vec<(usize, usize)>,
    reg: (usize, usize),
    cls: (usize, usize),
    total: usize,
}

/// Parameter layout of the forecaster; values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    cfg: ModelConfig,
    n_lat: usize,
    n_lon: usize,
    embed: ConvIds,
    blocks: Vec<ConvIds>,
    cond1: ConvIds,
    cond2: ConvIds,
    reg_head: ConvIds,
    cls_head: ConvIds,
    tau: ParamId,
    prior: EncoderIds,
    posterior: EncoderIds,
    slices: ModulationSlices,
}

fn conv_init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, co: usize, ci: usize, zero: bool, rng: &mut R) -> ConvIds {
    let w = if zero {
        Tensor::zeros(&[co, ci, 3, 3])
    } else {
        Tensor::randn(&[co, ci, 3, 3], 1.0 / libm::sqrt((ci * 9) as f64), rng)
    };
    ConvIds {
        w: store.add(format!("{name}.weight"), w),
        b: store.add(format!("{name}.bias"), Tensor::zeros(&[co])),
    }
}

fn encoder_init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> EncoderIds {
    let hidden = conv_init(store, &format!("{name}.hidden"), cfg.width, 2 * cfg.channels, false, rng);
    let mu = conv_init(store, &format!("{name}.mu"), cfg.channels, cfg.width, true, rng);
    let log_sigma = conv_init(store, &format!("{name}.log_sigma"), cfg.channels, cfg.width, true, rng);
    store.get_mut(log_sigma.b).value = Tensor::full(&[cfg.channels], cfg.log_sigma_init);
    EncoderIds { hidden, mu, log_sigma }
}

impl Forecaster {
    /// Registers freshly initialized parameters in a new store. Both heads and
    /// both encoders' output layers start at zero.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, n_lat: usize, n_lon: usize, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if n_lat == 0 || n_lon == 0 {
            return Err(Error::DegenerateGrid(format!("{n_lat}x{n_lon}")));
        }
        let mut store = ParamStore::new();
        let w = cfg.width;
        let c = cfg.channels;
        let embed = conv_init(&mut store, "embed", w, 2 * c, false, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|i| conv_init(&mut store, &format!("block{i}"), w, w, false, rng))
            .collect();

        let mut offset = 0;
        let mut take = |n: usize| {
            let s = (offset, offset + n);
            offset += 2 * n;
            s
        };
        let block_slices = (0..cfg.n_blocks).map(|_| take(w)).collect();
        let reg = take(2 * w);
        let cls = take(2 * w);
        let slices = ModulationSlices { blocks: block_slices, reg, cls, total: offset };

        let h = cfg.cond_hidden;
        let cond1 = ConvIds {
            w: store.add("cond.fc1.weight", Tensor::randn(&[h, 3], 1.0, rng)),
            b: store.add("cond.fc1.bias", Tensor::zeros(&[h, 1])),
        };
        let cond2 = ConvIds {
            w: store.add("cond.fc2.weight", Tensor::zeros(&[slices.total, h])),
            b: store.add("cond.fc2.bias", Tensor::zeros(&[slices.total, 1])),
        };
        let reg_head = conv_init(&mut store, "reg_head", c, 2 * w, true, rng);
        let cls_head = conv_init(&mut store, "cls_head", cfg.n_bins, 2 * w, true, rng);
        let tau = store.add("tau", Tensor::scalar(cfg.tau_init));
        let prior = encoder_init(&mut store, "prior", &cfg, rng);
        let posterior = encoder_init(&mut store, "posterior", &cfg, rng);
        let model = Self { cfg, n_lat, n_lon, embed, blocks, cond1, cond2, reg_head, cls_head, tau, prior, posterior, slices };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    pub fn state_shape(&self) -> [usize; 3] {
        [self.cfg.channels, self.n_lat, self.n_lon]
    }

    /// Effective temperature `max(tau, tau_min)`.
    pub fn temperature(&self, store: &ParamStore) -> f64 {
        store.get(self.tau).value.item().max(self.cfg.tau_min)
    }

    /// Parameter ids grouped by component, for inspection and tests.
    pub fn parameter_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let conv = |c: &ConvIds| [c.w, c.b];
        let enc = |e: &EncoderIds| [conv(&e.hidden), conv(&e.mu), conv(&e.log_sigma)].concat();
        let mut trunk: Vec<ParamId> = conv(&self.embed).to_vec();
        for b in &self.blocks {
            trunk.extend(conv(b));
        }
        trunk.extend(conv(&self.cond1));
        trunk.extend(conv(&self.cond2));
        alloc::vec![
            ("trunk", trunk),
            ("regression_head", conv(&self.reg_head).to_vec()),
            ("probabilistic_head", conv(&self.cls_head).to_vec()),
            ("temperature", alloc::vec![self.tau]),
            ("prior", enc(&self.prior)),
            ("posterior", enc(&self.posterior)),
        ]
    }

    fn check_state(&self, tape: &Tape, v: Var, what: &str) -> Result<()> {
        if tape.shape(v) != self.state_shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {:?}, got {:?}",
                self.state_shape(),
                tape.shape(v)
            )));
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape, store: &ParamStore, ids: ConvIds, x: Var) -> Result<Var> {
        let w = tape.param(store, ids.w)?;
        let b = tape.param(store, ids.b)?;
        tape.conv2d(x, w, Some(b))
    }

    /// Gaussian parameters from one encoder over the window `{a, b}`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, which: Encoder, a: Var, b: Var) -> Result<GaussianVars> {
        self.check_state(tape, a, "encoder input")?;
        self.check_state(tape, b, "encoder input")?;
        let ids = match which {
            Encoder::Prior => self.prior,
            Encoder::Posterior => self.posterior,
        };
        let x = tape.concat(&[a, b], 0)?;
        let h = self.conv(tape, store, ids.hidden, x)?;
        let h = tape.gelu(h)?;
        let mu = self.conv(tape, store, ids.mu, h)?;
        let raw = self.conv(tape, store, ids.log_sigma, h)?;
        let log_sigma = tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok(GaussianVars { mu, log_sigma })
    }

    /// Draws `z = mu + sigma * noise` from the posterior (train) or prior
    /// (infer) and returns `cur + z`.
    pub fn perturb(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mode: RolloutMode,
        prev: Var,
        cur: Var,
        next: Option<Var>,
        noise: Tensor,
    ) -> Result<Perturbation> {
        let prior = self.encode(tape, store, Encoder::Prior, prev, cur)?;
        let (source, posterior) = match mode {
            RolloutMode::Infer => (prior, None),
            RolloutMode::Train => {
                let next = next.ok_or_else(|| Error::Validation("training perturbation needs X^{t+1}".into()))?;
                let q = self.encode(tape, store, Encoder::Posterior, cur, next)?;
                (q, Some(q))
            }
        };
        let z = tape.gaussian_sample(source.mu, source.log_sigma, noise)?;
        let state = tape.add(cur, z)?;
        Ok(Perturbation { state, prior, posterior })
    }

    fn modulation(&self, tape: &mut Tape, store: &ParamStore, cond: &TemporalConditioning) -> Result<Var> {
        let input = Tensor::new(&[3, 1], alloc::vec![cond.step as f64 / self.cfg.step_scale, cond.doy_sin, cond.doy_cos])?;
        let x = tape.constant(input)?;
        let w1 = tape.param(store, self.cond1.w)?;
        let b1 = tape.param(store, self.cond1.b)?;
        let h = tape.matmul(w1, x)?;
        let h = tape.add(h, b1)?;
        let h = tape.gelu(h)?;
        let w2 = tape.param(store, self.cond2.w)?;
        let b2 = tape.param(store, self.cond2.b)?;
        let o = tape.matmul(w2, h)?;
        let o = tape.add(o, b2)?;
        tape.reshape(o, &[self.slices.total])
    }

    fn modulate(&self, tape: &mut Tape, x: Var, m: Var, at: (usize, usize)) -> Result<Var> {
        let n = tape.shape(x)[0];
        let scale = tape.narrow(m, 0, at.0, n)?;
        let shift = tape.narrow(m, 0, at.1, n)?;
        tape.scale_shift(x, scale, shift)
    }

    /// One forecast step from the window `{prev, cur}`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prev: Var,
        cur: Var,
        cond: &TemporalConditioning,
    ) -> Result<DualHeadVars> {
        self.check_state(tape, prev, "previous state")?;
        self.check_state(tape, cur, "current state")?;
        let m = self.modulation(tape, store, cond)?;
        let x = tape.concat(&[prev, cur], 0)?;
        let h0 = self.conv(tape, store, self.embed, x)?;
        let mut h = h0;
        for (ids, at) in self.blocks.iter().zip(&self.slices.blocks) {
            let u = self.modulate(tape, h, m, *at)?;
            let u = self.conv(tape, store, *ids, u)?;
            let u = tape.gelu(u)?;
            h = tape.add(h, u)?;
        }
        let fused = tape.concat(&[h, h0], 0)?;
        let r = self.modulate(tape, fused, m, self.slices.reg)?;
        let y = self.conv(tape, store, self.reg_head, r)?;
        let c = self.modulate(tape, fused, m, self.slices.cls)?;
        let raw = self.conv(tape, store, self.cls_head, c)?;
        let tau = tape.param(store, self.tau)?;
        let tau = tape.clamp(tau, self.cfg.tau_min, f64::MAX)?;
        let logits = tape.div_scalar(raw, tau)?;
        let probs = tape.softmax(logits, 0)?;
        Ok(DualHeadVars { y, logits, probs })
    }

    /// Gaussian parameters of one encoder as values.
    pub fn encoder_params(&self, store: &ParamStore, which: Encoder, a: &Tensor, b: &Tensor) -> Result<GaussianFieldParams> {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone())?, tape.constant(b.clone())?);
        let g = self.encode(&mut tape, store, which, va, vb)?;
        Ok(GaussianFieldParams { mu: tape.value(g.mu).clone(), log_sigma: tape.value(g.log_sigma).clone() })
    }

    /// Single forward step as values.
    pub fn predict(&self, store: &ParamStore, prev: &Tensor, cur: &Tensor, cond: &TemporalConditioning) -> Result<DualHeadOutput> {
        let mut tape = Tape::new();
        let (p, c) = (tape.constant(prev.clone())?, tape.constant(cur.clone())?);
        let out = self.forward(&mut tape, store, p, c, cond)?;
        Ok(DualHeadOutput::from_tape(&tape, &out, self.temperature(store)))
    }

    /// Autoregressive rollout without gradients. The perturbation is drawn
    /// once from `noise`; later windows are `{previous input, Yhat}`.
    pub fn rollout(
        &self,
        store: &ParamStore,
        window: &StateWindow,
        n_steps: usize,
        mode: RolloutMode,
        noise: Tensor,
    ) -> Result<Rollout> {
        if n_steps == 0 {
            return Err(Error::Validation("rollout needs at least one step".into()));
        }
        let tau = self.temperature(store);
        let mut outputs = Vec::with_capacity(n_steps);
        let mut tape = Tape::new();
        let prev = tape.constant(window.prev.clone())?;
        let cur = tape.constant(window.cur.clone())?;
        let next = match &window.next {
            Some(n) => Some(tape.constant(n.clone())?),
            None => None,
        };
        let pert = self.perturb(&mut tape, store, mode, prev, cur, next, noise)?;
        let perturbed = tape.value(pert.state).clone();
        let first = self.forward(&mut tape, store, prev, pert.state, &TemporalConditioning::new(1, add_days(window.date, 1)))?;
        outputs.push(DualHeadOutput::from_tape(&tape, &first, tau));
        check_divergence(&outputs[0].y, 1)?;
        let mut state_prev = perturbed.clone();
        for step in 2..=n_steps {
            let cond = TemporalConditioning::new(step, add_days(window.date, step as i64));
            let cur = outputs[step - 2].y.clone();
            let out = self.predict(store, &state_prev, &cur, &cond)?;
            check_divergence(&out.y, step)?;
            state_prev = cur;
            outputs.push(out);
        }
        Ok(Rollout { perturbed, outputs })
    }

    /// Replaces parameter values with those of `other`, requiring identical
    /// names and shapes in the same order.
    pub fn load_values(&self, store: &mut ParamStore, other: &ParamStore) -> Result<()> {
        if store.len() != other.len() {
            return Err(Error::Validation(format!("checkpoint has {} parameters, model {}", other.len(), store.len())));
        }
        for (dst, src) in store.iter_mut().zip(other.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Fails with a divergence error when any value exceeds [`DIVERGENCE_LIMIT`].
pub fn check_divergence(state: &Tensor, step: usize) -> Result<()> {
    let magnitude = state.max_abs();
    if magnitude > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, magnitude });
    }
    Ok(())
}

/// Standard-normal noise shaped like a state.
pub fn state_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Per-channel z-score normalization fitted on a training period; selected
/// channels are `log1p`-transformed first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub log1p: Vec<bool>,
}

impl Normalizer {
    /// Fits on every value of each channel's series between `first` and `last`.
    pub fn fit(channels: &[&DailySeries], log1p: &[bool], first: NaiveDate, last: NaiveDate) -> Result<Self> {
        if channels.len() != log1p.len() || channels.is_empty() {
            return Err(Error::ShapeMismatch("one log1p flag per channel".into()));
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (series, flag) in channels.iter().zip(log1p) {
            let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
            let mut d = first;
            while d <= last {
                for v in series.require(d, "normalization period")? {
                    let x = if *flag { libm::log1p(v.max(0.0)) } else { *v };
                    n += 1;
                    s += x;
                    s2 += x * x;
                }
                d = add_days(d, 1);
            }
            if n < 2 {
                return Err(Error::TooFewSamples { needed: 2, got: n });
            }
            let m = s / n as f64;
            let var = (s2 / n as f64 - m * m).max(0.0);
            let sd = libm::sqrt(var);
            if !(sd > 0.0) {
                return Err(Error::ZeroNorm("channel with zero variance".into()));
            }
            mean.push(m);
            std.push(sd);
        }
        Ok(Self { mean, std, log1p: log1p.to_vec() })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, channel: usize, value: f64) -> f64 {
        let x = if self.log1p[channel] { libm::log1p(value.max(0.0)) } else { value };
        (x - self.mean[channel]) / self.std[channel]
    }

    /// Inverse of [`Self::normalize`]; `log1p` channels are clipped at zero.
    pub fn denormalize(&self, channel: usize, z: f64) -> f64 {
        let x = z * self.std[channel] + self.mean[channel];
        if self.log1p[channel] {
            libm::expm1(x).max(0.0)
        } else {
            x
        }
    }

    /// Builds a normalized `[C, H, W]` state from per-channel physical fields.
    pub fn state(&self, fields: &[&[f64]], n_lat: usize, n_lon: usize) -> Result<Tensor> {
        if fields.len() != self.channels() {
            return Err(Error::ShapeMismatch(format!("{} fields for {} channels", fields.len(), self.channels())));
        }
        let mut data = Vec::with_capacity(fields.len() * n_lat * n_lon);
        for (c, f) in fields.iter().enumerate() {
            if f.len() != n_lat * n_lon {
                return Err(Error::ShapeMismatch(format!("field of {} cells on {n_lat}x{n_lon}", f.len())));
            }
            data.extend(f.iter().map(|v| self.normalize(c, *v)));
        }
        Tensor::new(&[fields.len(), n_lat, n_lon], data)
    }

    /// Physical values of one channel of a normalized state.
    pub fn physical_channel(&self, state: &Tensor, channel: usize) -> Vec<f64> {
        let cells = state.numel() / state.shape()[0];
        state.data()[channel * cells..(channel + 1) * cells]
            .iter()
            .map(|z| self.denormalize(channel, *z))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::climatology::CategoryLabel;
    use crate::grid::{latitude_weights, LatLonGrid};
    use crate::losses::{ce_loss, kl_diag_gaussians, one_hot, rps_loss};
    use crate::tensor::Gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 3, 5).unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { width: 4, cond_hidden: 4, ..ModelConfig::default() }
    }

    fn random_window(seed: u64, shape: [usize; 3]) -> StateWindow {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        StateWindow {
            prev: Tensor::randn(&shape, 1.0, &mut r),
            cur: Tensor::randn(&shape, 1.0, &mut r),
            next: Some(Tensor::randn(&shape, 1.0, &mut r)),
            date: date(),
        }
    }

    #[test]
    fn fresh_model_is_zero_and_uniform() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (m, store) = Forecaster::new(ModelConfig::default(), 4, 8, &mut r).unwrap();
        let w = random_window(1, m.state_shape());
        let out = m.predict(&store, &w.prev, &w.cur, &TemporalConditioning::new(1, date())).unwrap();
        assert!(out.y.data().iter().all(|v| v.to_bits() == 0.0f64.to_bits()));
        assert!(out.probs.data().iter().all(|p| *p == 0.2));

        let alpha = latitude_weights(&LatLonGrid::cell_centered(4, 8).unwrap()).unwrap();
        let labels = alloc::vec![CategoryLabel(1); 32];
        let mut t = Tape::new();
        let p = t.constant(out.probs.clone()).unwrap();
        let q = t.constant(one_hot(&labels, 5, 4, 8).unwrap()).unwrap();
        let ce = ce_loss(&mut t, p, q, &alpha).unwrap();
        let rps = rps_loss(&mut t, p, q, &alpha).unwrap();
        assert!((t.value(ce).item() - libm::log(5.0)).abs() < 1e-12);
        assert!((t.value(rps).item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn zero_init_encoders_and_tied_parameters() {
        let cfg = ModelConfig { log_sigma_init: 0.0, ..tiny_cfg() };
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (m, mut store) = Forecaster::new(cfg, 3, 5, &mut r).unwrap();
        let w = random_window(3, m.state_shape());
        let p = m.encoder_params(&store, Encoder::Prior, &w.prev, &w.cur).unwrap();
        assert!(p.mu.data().iter().all(|v| *v == 0.0));
        assert!(p.log_sigma.data().iter().all(|v| *v == 0.0));

        // Tie the posterior to the prior and feed both the same window.
        let groups = m.parameter_groups();
        let prior = &groups.iter().find(|g| g.0 == "prior").unwrap().1;
        let post = &groups.iter().find(|g| g.0 == "posterior").unwrap().1;
        for (a, b) in prior.iter().zip(post) {
            let v = Tensor::randn(store.get(*a).value.shape(), 0.3, &mut r);
            store.get_mut(*a).value = v.clone();
            store.get_mut(*b).value = v;
        }
        let mut t = Tape::new();
        let (a, b) = (t.constant(w.prev.clone()).unwrap(), t.constant(w.cur.clone()).unwrap());
        let gp = m.encode(&mut t, &store, Encoder::Prior, a, b).unwrap();
        let gq = m.encode(&mut t, &store, Encoder::Posterior, a, b).unwrap();
        assert_eq!(t.value(gp.mu), t.value(gq.mu));
        let kl = kl_diag_gaussians(&mut t, gq.mu, gq.log_sigma, gp.mu, gp.log_sigma).unwrap();
        assert_eq!(t.value(kl).item(), 0.0);
        let again = m.encoder_params(&store, Encoder::Prior, &w.prev, &w.cur).unwrap();
        assert_eq!(again.mu, *t.value(gp.mu));
    }

    #[test]
    fn perturbation_limits() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let (m, mut store) = Forecaster::new(tiny_cfg(), 3, 4, &mut r).unwrap();
        let w = random_window(5, m.state_shape());
        let ls_bias = store.find("prior.log_sigma.bias").unwrap();
        store.get_mut(ls_bias).value = Tensor::full(&[2], LOG_SIGMA_MIN);
        let noise = Tensor::randn(&m.state_shape(), 1.0, &mut r);
        let ro = m.rollout(&store, &w, 1, RolloutMode::Infer, noise).unwrap();
        for (a, b) in ro.perturbed.data().iter().zip(w.cur.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        // Zero noise leaves X + mu, and mu is zero at init.
        let ro = m.rollout(&store, &w, 1, RolloutMode::Infer, Tensor::zeros(&m.state_shape())).unwrap();
        assert_eq!(ro.perturbed, w.cur);
    }

    #[test]
    fn member_differences_scale_with_sigma() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (m, store) = Forecaster::new(tiny_cfg(), 2, 2, &mut r).unwrap();
        let w = random_window(7, m.state_shape());
        let sigma = libm::exp(m.config().log_sigma_init);
        let mut diffs = Vec::new();
        for _ in 0..1000 {
            let a = m.rollout(&store, &w, 1, RolloutMode::Infer, Tensor::randn(&m.state_shape(), 1.0, &mut r)).unwrap();
            let b = m.rollout(&store, &w, 1, RolloutMode::Infer, Tensor::randn(&m.state_shape(), 1.0, &mut r)).unwrap();
            diffs.push(a.perturbed.data()[0] - b.perturbed.data()[0]);
        }
        let var = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        // Var(sigma (n1 - n2)) = 2 sigma^2; sampling sd of the estimate is ~4.5%.
        let expected = 2.0 * sigma * sigma;
        assert!((var / expected - 1.0).abs() < 0.15, "{var} vs {expected}");
    }

    #[test]
    fn temperature_keeps_argmax_and_raises_entropy() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let (m, mut store) = Forecaster::new(tiny_cfg(), 2, 3, &mut r).unwrap();
        let head = store.find("cls_head.weight").unwrap();
        let shape = store.get(head).value.shape().to_vec();
        store.get_mut(head).value = Tensor::randn(&shape, 0.5, &mut r);
        let w = random_window(9, m.state_shape());
        let cond = TemporalConditioning::new(1, date());
        let tau = store.find("tau").unwrap();
        let entropy_and_argmax = |store: &ParamStore| {
            let out = m.predict(store, &w.prev, &w.cur, &cond).unwrap();
            let cells = 6;
            let mut ent = 0.0;
            let mut arg = Vec::new();
            for c in 0..cells {
                let p: Vec<f64> = (0..5).map(|k| out.probs.data()[k * cells + c]).collect();
                ent -= p.iter().map(|v| v * libm::log(*v)).sum::<f64>();
                arg.push((0..5).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap());
            }
            (ent, arg)
        };
        let (e1, a1) = entropy_and_argmax(&store);
        store.get_mut(tau).value = Tensor::scalar(10.0);
        let (e2, a2) = entropy_and_argmax(&store);
        assert_eq!(a1, a2);
        assert!(e2 > e1);
    }

    #[test]
    fn rollout_determinism_and_one_step_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let (m, mut store) = Forecaster::new(tiny_cfg(), 3, 4, &mut r).unwrap();
        for p in store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value.add_scaled(&Tensor::randn(&shape, 0.1, &mut r), 1.0).unwrap();
        }
        let w = random_window(11, m.state_shape());
        let n1 = Tensor::randn(&m.state_shape(), 1.0, &mut r);
        let n2 = Tensor::randn(&m.state_shape(), 1.0, &mut r);
        let a = m.rollout(&store, &w, 5, RolloutMode::Infer, n1.clone()).unwrap();
        let b = m.rollout(&store, &w, 5, RolloutMode::Infer, n1.clone()).unwrap();
        let c = m.rollout(&store, &w, 5, RolloutMode::Infer, n2).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert_ne!(a.outputs[4].y, c.outputs[4].y);
        let one = m.rollout(&store, &w, 1, RolloutMode::Infer, n1).unwrap();
        let direct = m.predict(&store, &w.prev, &one.perturbed, &TemporalConditioning::new(1, add_days(date(), 1))).unwrap();
        assert_eq!(one.outputs[0], direct);
        assert_eq!(one.outputs[0], a.outputs[0]);
    }

    #[test]
    fn degenerate_prior_gives_identical_members() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let (m, mut store) = Forecaster::new(tiny_cfg(), 3, 4, &mut r).unwrap();
        let ls_bias = store.find("prior.log_sigma.bias").unwrap();
        store.get_mut(ls_bias).value = Tensor::full(&[2], -1e3);
        let w = random_window(13, m.state_shape());
        let a = m.rollout(&store, &w, 3, RolloutMode::Infer, Tensor::randn(&m.state_shape(), 1.0, &mut r)).unwrap();
        let b = m.rollout(&store, &w, 3, RolloutMode::Infer, Tensor::randn(&m.state_shape(), 1.0, &mut r)).unwrap();
        for (x, y) in a.outputs[2].y.data().iter().zip(b.outputs[2].y.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn divergence_guard_trips() {
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let (m, mut store) = Forecaster::new(tiny_cfg(), 2, 2, &mut r).unwrap();
        let b = store.find("reg_head.bias").unwrap();
        store.get_mut(b).value = Tensor::full(&[2], 2e6);
        let w = random_window(15, m.state_shape());
        let err = m.rollout(&store, &w, 2, RolloutMode::Infer, Tensor::zeros(&m.state_shape())).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
    }

    #[test]
    fn end_to_end_gradients_reach_every_group() {
        let mut r = ChaCha8Rng::seed_from_u64(16);
        let (m, mut store) = Forecaster::new(tiny_cfg(), 4, 8, &mut r).unwrap();
        for p in store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value.add_scaled(&Tensor::randn(&shape, 0.2, &mut r), 1.0).unwrap();
        }
        let w = random_window(17, m.state_shape());
        let noise = Tensor::randn(&m.state_shape(), 1.0, &mut r);
        let labels: Vec<CategoryLabel> = (0..32).map(|_| CategoryLabel(r.random_range(1..=5u8))).collect();
        let oh = one_hot(&labels, 5, 4, 8).unwrap();
        let target = Tensor::randn(&m.state_shape(), 1.0, &mut r);
        let mut t = Tape::new();
        let l = crate::checks::end_to_end_objective(&m, &mut t, &store, &w, &noise, &target, &oh).unwrap();
        let mut g = Gradients::for_store(&store);
        t.backward(l, 1.0, &mut g).unwrap();
        for (name, ids) in m.parameter_groups() {
            let norm: f64 = ids.iter().map(|id| g.get(*id).map_or(0.0, |t| t.max_abs())).fold(0.0, f64::max);
            assert!(norm > 0.0, "no gradient reaches {name}");
        }
    }
}
