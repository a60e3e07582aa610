//! Ensemble-consistent curriculum training.
//!
//! Phase 1 rolls each of `B` independent samples out to the current depth and
//! supervises every step with that sample's own outputs. Phase 2 rolls one
//! sample out `G` times with independent perturbations, supervises only steps
//! inside the phase-2 range, and scores the member-mean regression field and
//! the member-mean bin probabilities. States are detached between rollout
//! steps, so each step owns a fresh tape.
//!
//! All randomness is drawn from streams keyed by `(seed, iteration, slot)`,
//! which makes a run a pure function of its configuration, data and iteration
//! counter and lets a checkpoint resume bit-exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::add_days;
use crate::climatology::{discretize_field, CalendarClimatology};
use crate::error::{Error, Result};
use crate::field::DailySeries;
use crate::grid::LatWeights;
use crate::losses::{
    ce_loss, charbonnier_loss, kl_diag_gaussians, one_hot, rps_loss, total_objective, LossComponents, LossWeights,
};
use crate::model::{check_divergence, Forecaster, Normalizer, RolloutMode, TemporalConditioning};
use crate::rng::stream;
use crate::tensor::{Gradients, ParamStore, Tape, Tensor, Var};

/// Stream slot used for sample selection; member streams use `1 + index`.
const SAMPLE_SLOT: u64 = 0;

/// Normalized daily states with one-hot labels of the classified channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    start: NaiveDate,
    states: Vec<Tensor>,
    labels: Vec<Option<Tensor>>,
}

impl TrainingData {
    pub fn new(start: NaiveDate, states: Vec<Tensor>, labels: Vec<Option<Tensor>>) -> Result<Self> {
        if states.len() != labels.len() || states.is_empty() {
            return Err(Error::ShapeMismatch("one label slot per state is required".into()));
        }
        let shape = states[0].shape().to_vec();
        if states.iter().any(|s| s.shape() != shape.as_slice()) {
            return Err(Error::ShapeMismatch("states differ in shape".into()));
        }
        Ok(Self { start, states, labels })
    }

    /// Builds states for `first..=last` and labels from the classified
    /// channel's weekly means against calendar-day thresholds. Days whose
    /// weekly mean is unavailable get no label.
    pub fn from_series(
        channels: &[&DailySeries],
        normalizer: &Normalizer,
        weekly_classified: &DailySeries,
        clim: &CalendarClimatology,
        first: NaiveDate,
        last: NaiveDate,
        n_lat: usize,
        n_lon: usize,
    ) -> Result<Self> {
        let mut states = Vec::new();
        let mut labels = Vec::new();
        let mut d = first;
        while d <= last {
            let fields = channels
                .iter()
                .map(|s| s.require(d, "training state"))
                .collect::<Result<Vec<_>>>()?;
            states.push(normalizer.state(&fields, n_lat, n_lon)?);
            labels.push(match weekly_classified.get(d) {
                Some(w) => {
                    let l = discretize_field(w, clim.thresholds(d))?;
                    Some(one_hot(&l, clim.n_bins(), n_lat, n_lon)?)
                }
                None => None,
            });
            d = add_days(d, 1);
        }
        Self::new(first, states, labels)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn date(&self, index: usize) -> NaiveDate {
        add_days(self.start, index as i64)
    }

    pub fn state(&self, index: usize) -> &Tensor {
        &self.states[index]
    }

    pub fn label(&self, index: usize) -> Option<&Tensor> {
        self.labels[index].as_ref()
    }

    fn label_at(&self, index: usize) -> Result<&Tensor> {
        self.label(index)
            .ok_or_else(|| Error::MissingData(format!("label for {}", self.date(index))))
    }

    /// Initialization indices whose rollout to `depth` stays in range and has
    /// labels for every supervised step `sup_start..=depth`.
    pub fn valid_inits(&self, depth: usize, sup_start: usize) -> Vec<usize> {
        (1..self.len().saturating_sub(depth))
            .filter(|t| (sup_start.max(1)..=depth).all(|k| self.labels[t + k].is_some()))
            .collect()
    }
}

/// Curriculum plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ECCTSchedule {
    /// Inclusive rollout-depth range of phase 1.
    pub phase1: [usize; 2],
    /// Inclusive rollout-depth range of phase 2; also its supervised steps.
    pub phase2: [usize; 2],
    pub iters_per_step: u64,
    /// Independent samples per phase-1 update.
    pub batch_size: usize,
    /// Perturbed members per phase-2 update.
    pub group_size: usize,
    pub phase2_enabled: bool,
}

impl Default for ECCTSchedule {
    fn default() -> Self {
        Self { phase1: [1, 6], phase2: [12, 18], iters_per_step: 1000, batch_size: 4, group_size: 4, phase2_enabled: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Where a global iteration falls in the curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub phase: Phase,
    pub depth: usize,
}

impl ECCTSchedule {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.phase1;
        let [c, d] = self.phase2;
        if a == 0 || a > b {
            return Err(Error::Validation(format!("phase-1 range {a}..={b} is empty")));
        }
        if self.phase2_enabled {
            if c == 0 || c > d {
                return Err(Error::Validation(format!("phase-2 range {c}..={d} is empty")));
            }
            if self.group_size < 2 {
                return Err(Error::Validation(format!("phase 2 needs a group of at least 2, got {}", self.group_size)));
            }
        }
        if self.iters_per_step == 0 || self.batch_size == 0 {
            return Err(Error::Validation("iters_per_step and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn phase1_iterations(&self) -> u64 {
        (self.phase1[1] - self.phase1[0] + 1) as u64 * self.iters_per_step
    }

    pub fn phase2_iterations(&self) -> u64 {
        if self.phase2_enabled {
            (self.phase2[1] - self.phase2[0] + 1) as u64 * self.iters_per_step
        } else {
            0
        }
    }

    pub fn total_iterations(&self) -> u64 {
        self.phase1_iterations() + self.phase2_iterations()
    }

    pub fn position(&self, iteration: u64) -> Option<Position> {
        if iteration < self.phase1_iterations() {
            let depth = self.phase1[0] + (iteration / self.iters_per_step) as usize;
            return Some(Position { phase: Phase::One, depth });
        }
        let rest = iteration - self.phase1_iterations();
        if rest < self.phase2_iterations() {
            let depth = self.phase2[0] + (rest / self.iters_per_step) as usize;
            return Some(Position { phase: Phase::Two, depth });
        }
        None
    }

    /// Deepest rollout any iteration uses.
    pub fn max_depth(&self) -> usize {
        if self.phase2_enabled {
            self.phase1[1].max(self.phase2[1])
        } else {
            self.phase1[1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && unit(self.beta1) && unit(self.beta2) && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// One AdamW step. Decay is applied to the parameter before the Adam
    /// update; missing gradients count as zero. Nothing changes if any
    /// gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Validation("optimizer state built for another model".into()));
        }
        for (id, p) in store.ids().zip(store.iter()) {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let p = store.get_mut(id);
            let (m, v) = (self.m[id.0].data_mut(), self.v[id.0].data_mut());
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                *x *= 1.0 - c.lr * c.weight_decay;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let denom = libm::sqrt(v[k]) / libm::sqrt(bc2) + c.eps;
                *x -= c.lr / bc1 * m[k] / denom;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: ECCTSchedule,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Extra checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ECCTSchedule::default(),
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.weights.validate()
    }
}

/// Everything needed to continue a run besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Number of completed iterations; also the RNG counter.
    pub iteration: u64,
    pub seed: u64,
    pub optimizer: OptimizerState,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        Self { iteration: 0, seed: cfg.seed, optimizer: OptimizerState::new(cfg.optimizer, store) }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub phase: u8,
    pub depth: usize,
    pub reg: f64,
    pub rps: f64,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointEvent {
    Periodic,
    PhaseBoundary,
    Final,
}

/// Observer of a curriculum run.
pub trait TrainingHooks {
    fn on_iteration(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _event: CheckpointEvent, _store: &ParamStore, _state: &TrainerState) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainingHooks for NoHooks {}

/// Read-only inputs shared by all steps of a run.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub model: &'a Forecaster,
    pub data: &'a TrainingData,
    pub alpha: &'a LatWeights,
    pub weights: &'a LossWeights,
}

/// Mean of several same-shaped vars (a plain copy for one).
fn member_mean(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = tape.add(acc, *v)?;
    }
    tape.mul_const(acc, 1.0 / vars.len() as f64)
}

impl<'a> StepContext<'a> {
    /// Rolls `noises.len()` perturbed members of sample `t` out to `depth`,
    /// scoring the member means at steps `sup_start..=depth`, and adds
    /// `grad_scale` times the objective's gradient into `grads`.
    fn run_group(
        &self,
        store: &ParamStore,
        t: usize,
        noises: Vec<Tensor>,
        depth: usize,
        sup_start: usize,
        grad_scale: f64,
        grads: &mut Gradients,
    ) -> Result<LossComponents> {
        let data = self.data;
        let model = self.model;
        let n_sup = (depth + 1).saturating_sub(sup_start.max(1));
        let mut sums = LossComponents::default();
        let mut windows: Vec<(Tensor, Tensor)> = Vec::new();
        for k in 1..=depth {
            let mut tape = Tape::new();
            let cond = TemporalConditioning::new(k, data.date(t + k));
            let mut kl_term = None;
            let mut outs = Vec::with_capacity(noises.len());
            let mut inputs = Vec::with_capacity(noises.len());
            if k == 1 {
                let prev = tape.constant(data.state(t - 1).clone())?;
                let cur = tape.constant(data.state(t).clone())?;
                let next = tape.constant(data.state(t + 1).clone())?;
                let mut kls = Vec::new();
                for noise in &noises {
                    let p = model.perturb(&mut tape, store, RolloutMode::Train, prev, cur, Some(next), noise.clone())?;
                    let q = p.posterior.expect("training mode yields a posterior");
                    kls.push(kl_diag_gaussians(&mut tape, q.mu, q.log_sigma, p.prior.mu, p.prior.log_sigma)?);
                    outs.push(model.forward(&mut tape, store, prev, p.state, &cond)?);
                    inputs.push(p.state);
                }
                kl_term = Some(member_mean(&mut tape, &kls)?);
            } else {
                for (prev, cur) in &windows {
                    let p = tape.constant(prev.clone())?;
                    let c = tape.constant(cur.clone())?;
                    outs.push(model.forward(&mut tape, store, p, c, &cond)?);
                    inputs.push(c);
                }
            }

            let supervised = k >= sup_start;
            let (mut reg, mut rps, mut ce) = (None, None, None);
            if supervised {
                let ys: Vec<Var> = outs.iter().map(|o| o.y).collect();
                let ps: Vec<Var> = outs.iter().map(|o| o.probs).collect();
                let y_bar = member_mean(&mut tape, &ys)?;
                let q_bar = member_mean(&mut tape, &ps)?;
                let target = tape.constant(data.state(t + k).clone())?;
                let onehot = tape.constant(data.label_at(t + k)?.clone())?;
                let r = charbonnier_loss(&mut tape, y_bar, target, self.alpha, self.weights.epsilon)?;
                let p = rps_loss(&mut tape, q_bar, onehot, self.alpha)?;
                let c = ce_loss(&mut tape, q_bar, onehot, self.alpha)?;
                let inv = 1.0 / n_sup as f64;
                sums.reg += inv * tape.value(r).item();
                sums.rps += inv * tape.value(p).item();
                sums.ce += inv * tape.value(c).item();
                reg = Some(tape.mul_const(r, inv)?);
                rps = Some(tape.mul_const(p, inv)?);
                ce = Some(tape.mul_const(c, inv)?);
            }
            if let Some(kl) = kl_term {
                sums.kl = tape.value(kl).item();
            }
            if let Some(obj) = total_objective(&mut tape, reg, rps, ce, kl_term, self.weights)? {
                tape.backward(obj, grad_scale, grads)?;
            }

            if k < depth {
                windows = inputs
                    .iter()
                    .zip(&outs)
                    .map(|(i, o)| {
                        let y = tape.value(o.y).clone();
                        check_divergence(&y, k)?;
                        Ok((tape.value(*i).clone(), y))
                    })
                    .collect::<Result<_>>()?;
            } else {
                for o in &outs {
                    check_divergence(tape.value(o.y), k)?;
                }
            }
        }
        sums.total = crate::losses::total_value(sums.reg, sums.rps, sums.ce, sums.kl, self.weights);
        Ok(sums)
    }

    fn member_noise(&self, seed: u64, iteration: u64, slot: u64) -> Tensor {
        let mut rng = stream(seed, iteration, 1 + slot);
        Tensor::randn(&self.model.state_shape(), 1.0, &mut rng)
    }

    /// Phase-1 update direction: each sample in `inits` is its own one-member
    /// group supervised at every step up to `depth`. Gradients are averaged
    /// over the batch; components are batch means.
    pub fn train_step_phase1(
        &self,
        store: &ParamStore,
        inits: &[usize],
        depth: usize,
        seed: u64,
        iteration: u64,
        grads: &mut Gradients,
    ) -> Result<LossComponents> {
        if inits.is_empty() {
            return Err(Error::Empty("phase-1 batch".into()));
        }
        let scale = 1.0 / inits.len() as f64;
        let mut mean = LossComponents::default();
        for (b, t) in inits.iter().enumerate() {
            let noise = self.member_noise(seed, iteration, b as u64);
            let c = self.run_group(store, *t, alloc::vec![noise], depth, 1, scale, grads)?;
            mean.accumulate(&c, scale);
        }
        Ok(mean)
    }

    /// Phase-2 update direction: `group` perturbed members of sample `t`,
    /// scored on their means at steps `sup_start..=depth`.
    pub fn train_step_phase2(
        &self,
        store: &ParamStore,
        t: usize,
        group: usize,
        depth: usize,
        sup_start: usize,
        seed: u64,
        iteration: u64,
        grads: &mut Gradients,
    ) -> Result<LossComponents> {
        if group == 0 {
            return Err(Error::Validation("phase-2 group must not be empty".into()));
        }
        let noises = (0..group as u64).map(|g| self.member_noise(seed, iteration, g)).collect();
        self.run_group(store, t, noises, depth, sup_start, 1.0, grads)
    }

    /// Runs one curriculum iteration at `pos`: sample selection, gradient,
    /// optimizer update.
    pub fn iteration(
        &self,
        store: &mut ParamStore,
        state: &mut TrainerState,
        schedule: &ECCTSchedule,
        pos: Position,
    ) -> Result<LossComponents> {
        let seed = state.seed;
        let it = state.iteration;
        let mut rng = stream(seed, it, SAMPLE_SLOT);
        let mut grads = Gradients::for_store(store);
        let comps = match pos.phase {
            Phase::One => {
                let valid = self.data.valid_inits(pos.depth, 1);
                if valid.is_empty() {
                    return Err(Error::TooShort { needed: pos.depth + 2, got: self.data.len() });
                }
                let inits: Vec<usize> =
                    (0..schedule.batch_size).map(|_| valid[rng.random_range(0..valid.len())]).collect();
                self.train_step_phase1(store, &inits, pos.depth, seed, it, &mut grads)?
            }
            Phase::Two => {
                let sup = schedule.phase2[0];
                let valid = self.data.valid_inits(pos.depth, sup);
                if valid.is_empty() {
                    return Err(Error::TooShort { needed: pos.depth + 2, got: self.data.len() });
                }
                let t = valid[rng.random_range(0..valid.len())];
                self.train_step_phase2(store, t, schedule.group_size, pos.depth, sup, seed, it, &mut grads)?
            }
        };
        state.optimizer.update(store, &grads)?;
        state.iteration += 1;
        Ok(comps)
    }
}

/// Runs the curriculum from `state.iteration` up to `until` (or the end).
/// Checkpoints are reported after the last phase-1 iteration, at the end, and
/// every `checkpoint_every` iterations when set.
pub fn run_curriculum(
    ctx: &StepContext<'_>,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    state: &mut TrainerState,
    until: Option<u64>,
    hooks: &mut dyn TrainingHooks,
) -> Result<()> {
    cfg.validate()?;
    if state.seed != cfg.seed {
        return Err(Error::Validation(format!(
            "resume state was trained with seed {}, config says {}",
            state.seed, cfg.seed
        )));
    }
    let total = cfg.schedule.total_iterations();
    let stop = until.map_or(total, |u| u.min(total));
    while state.iteration < stop {
        let pos = cfg.schedule.position(state.iteration).expect("iteration inside the schedule");
        let it = state.iteration;
        let c = ctx.iteration(store, state, &cfg.schedule, pos)?;
        hooks.on_iteration(&LogRecord {
            iteration: it,
            phase: pos.phase.number(),
            depth: pos.depth,
            reg: c.reg,
            rps: c.rps,
            ce: c.ce,
            kl: c.kl,
            total: c.total,
        })?;
        let done = state.iteration;
        if done == total {
            hooks.on_checkpoint(CheckpointEvent::Final, store, state)?;
        } else if done == cfg.schedule.phase1_iterations() {
            hooks.on_checkpoint(CheckpointEvent::PhaseBoundary, store, state)?;
        } else if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            hooks.on_checkpoint(CheckpointEvent::Periodic, store, state)?;
        }
    }
    Ok(())
}

/// Short human-readable summary of a schedule.
pub fn describe_schedule(s: &ECCTSchedule) -> String {
    format!(
        "phase 1 depth {}..={} (batch {}), phase 2 {} depth {}..={} (group {}), {} iterations per depth",
        s.phase1[0],
        s.phase1[1],
        s.batch_size,
        if s.phase2_enabled { "on" } else { "off" },
        s.phase2[0],
        s.phase2[1],
        s.group_size,
        s.iters_per_step
    )
}
