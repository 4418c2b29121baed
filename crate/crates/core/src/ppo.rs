//! Clipped-surrogate policy optimization for long-run average cost.
//!
//! Three algorithms share one loop. `Standard` and `Amp` run a fixed number
//! of regenerative cycles per actor and regress the value network on
//! regenerative estimates of the relative value function, without and with
//! the martingale control variate built from the previous value network.
//! `Discounted` runs fixed-length episodes from a pool of initial states and
//! regresses on regenerative discounted estimates centred at `r̂(x*)`.
//!
//! The control variate is always the previous value network shifted so that
//! it vanishes at x*; it is identically zero in the first iteration.

use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorConfig, ValueTarget, Variant};
use crate::mdp::{self, ControlModel, State, StepMode};
use crate::network::ModelFile;
use crate::nn::{Adam, Architecture, Mlp, Workspace};
use crate::par;
use crate::policy::{
    clone_from_teacher, law_log_prob, masked_log_prob_grad, masked_softmax, Checkpoint, CloneConfig, Policy,
};
use crate::rng::{stream, Purpose};
use crate::simulation::{generate_batch, run_steps, BatchPlan, Budget, EpisodeBatch, DEFAULT_MAX_STEPS};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Regenerative cycles, standard relative-value estimates.
    Standard,
    /// Regenerative cycles, martingale control variate.
    Amp,
    /// Fixed-length episodes, regenerative discounted estimates.
    Discounted,
}

impl Algorithm {
    pub fn number(self) -> u8 {
        match self {
            Algorithm::Standard => 1,
            Algorithm::Amp => 2,
            Algorithm::Discounted => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Algorithm::Standard),
            2 => Some(Algorithm::Amp),
            3 => Some(Algorithm::Discounted),
            _ => None,
        }
    }
}

/// Initial policy network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Initialization {
    Xavier,
    /// Behaviour-clone the proportionally randomized policy from a long run.
    ClonePr {
        states: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub actors: usize,
    /// Cycles per actor (algorithms 1 and 2).
    pub cycles: usize,
    /// Steps per actor with targets (algorithm 3); `tail` more close the sums.
    pub horizon: usize,
    pub tail: usize,
    /// Actors that restart from x* every iteration in algorithm 3, so that
    /// `r̂(x*)` always has visits. The others start from sampled pool states.
    pub anchored_actors: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub variant: Variant,
    pub target: ValueTarget,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub clip_floor: f64,
    pub policy_lr: f64,
    pub policy_lr_floor: f64,
    pub value_lr: f64,
    pub seed: u64,
    pub init: Initialization,
    pub checkpoint_every: usize,
    pub mode: StepMode,
    pub max_steps: usize,
    pub policy_input_scale: f64,
    pub value_input_scale: f64,
    pub value_output_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Defaults for the cycle-based algorithms.
    pub fn full() -> Self {
        Self {
            algorithm: Algorithm::Amp,
            iterations: 200,
            actors: 50,
            cycles: 5000,
            horizon: 50_000,
            tail: estimators::default_horizon(0.998),
            anchored_actors: 0,
            gamma: 0.998,
            lambda: 0.99,
            variant: Variant::Amp,
            target: ValueTarget::RegenerativeDiscounted,
            epochs: 3,
            minibatch: 2048,
            clip: 0.2,
            clip_floor: 0.01,
            policy_lr: 5e-4,
            policy_lr_floor: 0.05,
            value_lr: 2.5e-4,
            seed: 0,
            init: Initialization::Xavier,
            checkpoint_every: 10,
            mode: StepMode::EveryTransition,
            max_steps: DEFAULT_MAX_STEPS,
            policy_input_scale: 1.0,
            value_input_scale: 1.0,
            value_output_scale: 30.0,
        }
    }

    /// Desk-scale run: `Q = 5`, `N = 500`, `I = 50` with the full-scale schedules.
    /// The smaller batch gets a smaller minibatch and a faster value fit.
    pub fn desk() -> Self {
        Self { iterations: 50, actors: 5, cycles: 500, minibatch: 512, value_lr: 1e-3, ..Self::full() }
    }

    /// Defaults for the discounted algorithm.
    pub fn discounted() -> Self {
        Self { algorithm: Algorithm::Discounted, ..Self::full() }
    }

    /// Desk-scale discounted run for the extended networks: `Q = 10`,
    /// `N = 10⁴`, `I = 50` from a PR clone, one actor anchored at x*. Relative
    /// values there reach 10⁴, so the value net gets a 0.1 input scale and a
    /// 300 output multiplier.
    pub fn desk_extended() -> Self {
        Self {
            iterations: 50,
            actors: 10,
            horizon: 10_000,
            anchored_actors: 1,
            init: Initialization::ClonePr { states: 100_000 },
            minibatch: 512,
            value_lr: 1e-3,
            value_input_scale: 0.1,
            value_output_scale: 300.0,
            ..Self::discounted()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidNetwork(m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.actors == 0 {
            return bad("epochs, minibatch and actors must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0 && self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("gamma and lambda must lie in (0, 1]");
        }
        Ok(())
    }

    /// `α = (I − i)/I`.
    pub fn alpha(&self, i: usize) -> f64 {
        if self.iterations == 0 {
            1.0
        } else {
            (self.iterations - i) as f64 / self.iterations as f64
        }
    }

    pub fn clip_at(&self, i: usize) -> f64 {
        self.clip * self.alpha(i).max(self.clip_floor)
    }

    pub fn policy_lr_at(&self, i: usize) -> f64 {
        self.policy_lr * self.alpha(i).max(self.policy_lr_floor)
    }

    fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            gamma: self.gamma,
            lambda: self.lambda,
            tail: self.tail,
            variant: self.variant,
            target: self.target,
        }
    }
}

/// Summary of one policy iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub samples: usize,
    pub avg_cost: f64,
    /// Centre of the targets and advantages: `r̂(x*)` or the average cost.
    pub center: f64,
    pub value_loss: f64,
    pub surrogate_loss: f64,
    pub clip_fraction: f64,
    /// Pooled within-state variance of the value targets.
    pub target_variance: f64,
    pub clip: f64,
    pub policy_lr: f64,
}

impl IterationReport {
    pub const CSV_HEADER: [&'static str; 10] = [
        "iteration",
        "samples",
        "avg_cost",
        "center",
        "value_loss",
        "surrogate_loss",
        "clip_fraction",
        "target_variance",
        "clip",
        "policy_lr",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.samples.to_string(),
            format!("{}", self.avg_cost),
            format!("{}", self.center),
            format!("{}", self.value_loss),
            format!("{}", self.surrogate_loss),
            format!("{}", self.clip_fraction),
            format!("{}", self.target_variance),
            format!("{}", self.clip),
            format!("{}", self.policy_lr),
        ]
    }
}

/// One surrogate sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSample {
    pub state: State,
    pub action: Vec<u8>,
    pub advantage: f64,
    pub log_prob_old: f64,
}

/// Per-sample clipped objective `max(r·Â, clip(r)·Â)` and whether the
/// unclipped branch carries the gradient.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let a = ratio * advantage;
    let b = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if a >= b {
        (a, true)
    } else {
        (b, false)
    }
}

/// Sum over `idx` of the clipped objective, its parameter gradient, and the
/// number of samples whose clipped branch was selected.
pub fn clipped_surrogate<M: ControlModel + ?Sized>(
    model: &M,
    net: &Mlp,
    samples: &[SurrogateSample],
    idx: &[usize],
    eps: f64,
) -> (f64, Vec<f64>, usize) {
    let clipped = std::sync::atomic::AtomicUsize::new(0);
    let (loss, grad) = net.batch_gradient(
        idx.len(),
        |i, buf| buf.extend(samples[idx[i]].state.iter().map(|&v| v as f64)),
        |i, logits, dout| {
            let s = &samples[idx[i]];
            let logp = masked_log_prob_grad(model, &s.state, logits, &s.action, dout);
            let ratio = (logp - s.log_prob_old).exp();
            let (v, live) = clipped_term(ratio, s.advantage, eps);
            if live {
                let k = ratio * s.advantage;
                dout.iter_mut().for_each(|d| *d *= k);
            } else {
                clipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                dout.iter_mut().for_each(|d| *d = 0.0);
            }
            v
        },
    );
    (loss, grad, clipped.into_inner())
}

/// Minibatch Adam on the squared error `Σ (f(x) − target)²`; returns the
/// mean loss of each epoch. Gradients are averaged per minibatch.
pub fn fit_value(
    net: &mut Mlp,
    adam: &mut Adam,
    states: &[State],
    targets: &[f64],
    epochs: usize,
    minibatch: usize,
    lr: f64,
    seed: u64,
    iteration: usize,
) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Err(Error::InsufficientData("value regression needs data".into()));
    }
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        order.shuffle(&mut stream(seed, Purpose::Shuffle, iteration as u64, 2 * e as u64 + 1));
        let mut total = 0.0;
        for mb in order.chunks(minibatch.max(1)) {
            let (loss, grad) = net.batch_gradient(
                mb.len(),
                |i, buf| buf.extend(states[mb[i]].iter().map(|&v| v as f64)),
                |i, out, dout| {
                    let d = out[0] - targets[mb[i]];
                    dout[0] = 2.0 * d;
                    d * d
                },
            );
            let m = mb.len() as f64;
            let grad: Vec<f64> = grad.iter().map(|g| g / m).collect();
            adam.step(net.params_mut(), &grad, lr);
            total += loss;
        }
        let mean = total / states.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss(iteration));
        }
        losses.push(mean);
    }
    Ok(losses)
}

/// Distinct states of a batch and their successors, with per-step ids.
pub struct StateIndex {
    pub states: Vec<State>,
    map: HashMap<State, u32>,
    /// Ids `< visited` are states occurring in some episode.
    pub visited: usize,
    /// `steps[q][t]` is the id of `x_t` in episode `q`, for `t ≤ len`.
    pub steps: Vec<Vec<u32>>,
}

impl StateIndex {
    pub fn build<M: ControlModel + ?Sized>(model: &M, batch: &EpisodeBatch) -> Self {
        let mut s = Self { states: Vec::new(), map: HashMap::new(), visited: 0, steps: Vec::new() };
        s.insert(model.regeneration_state());
        for ep in &batch.episodes {
            let ids = (0..=ep.len()).map(|t| s.insert(ep.state(t))).collect();
            s.steps.push(ids);
        }
        s.visited = s.states.len();
        let mut succ = Vec::new();
        for v in 0..s.visited {
            let x = s.states[v].clone();
            estimators::successors(model, &x, &mut succ);
            for y in &succ {
                s.insert(y);
            }
        }
        s
    }

    fn insert(&mut self, x: &[u32]) -> u32 {
        if let Some(&i) = self.map.get(x) {
            return i;
        }
        let i = self.states.len() as u32;
        self.states.push(x.to_vec());
        self.map.insert(x.to_vec(), i);
        i
    }

    pub fn id(&self, x: &[u32]) -> Option<u32> {
        self.map.get(x).copied()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `f(x) − f(x*)` at every indexed state.
    pub fn centred_values(&self, net: &Mlp) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        par::for_chunks_mut(&mut out, 1024, |c, chunk| {
            let mut ws = Workspace::default();
            for (k, o) in chunk.iter_mut().enumerate() {
                *o = net.forward_state(&self.states[c * 1024 + k], &mut ws)[0];
            }
        });
        let anchor = out[0];
        out.iter_mut().for_each(|v| *v -= anchor);
        out
    }

    /// Policy laws at the visited states.
    pub fn laws<M: ControlModel + ?Sized>(&self, model: &M, policy: &Policy) -> Vec<f64> {
        let total = model.layout().total();
        let mut out = vec![0.0; self.visited * total];
        par::for_chunks_mut(&mut out, 256 * total, |c, chunk| {
            let mut ws = Workspace::default();
            for (k, l) in chunk.chunks_mut(total).enumerate() {
                policy.law_into(model, &self.states[c * 256 + k], l, &mut ws);
            }
        });
        out
    }

    /// `Σ_y P(y|x) f(y)` under the given laws, at every visited state.
    pub fn expected_next<M: ControlModel + ?Sized>(&self, model: &M, laws: &[f64], f: &[f64]) -> Vec<f64> {
        let total = model.layout().total();
        let mut out = vec![0.0; self.visited];
        par::for_chunks_mut(&mut out, 256, |c, chunk| {
            let (mut moves, mut scratch, mut buf) = (Vec::new(), Vec::new(), Vec::new());
            for (k, o) in chunk.iter_mut().enumerate() {
                let v = c * 256 + k;
                let x = &self.states[v];
                mdp::law_moves(model, x, &laws[v * total..(v + 1) * total], &mut moves, &mut scratch);
                *o = mdp::expect_moves(x, &moves, &mut buf, |y| f[self.id(y).unwrap() as usize]);
            }
        });
        out
    }
}

/// Value targets of a batch, keyed by state id.
#[derive(Clone, Debug, Default)]
pub struct Targets {
    /// `(episode, step)` of each target.
    pub at: Vec<(usize, usize)>,
    pub ids: Vec<u32>,
    pub values: Vec<f64>,
}

/// Which estimator a target computation uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSpec {
    pub algorithm: Algorithm,
    pub estimator: EstimatorConfig,
    /// Steps per episode that receive targets in algorithm 3.
    pub horizon: usize,
}

/// Computes value targets for every step that receives one.
///
/// `zeta` and `pzeta` hold the centred control variate on all indexed states
/// and its one-step expectation on the visited ones.
pub fn compute_targets(
    index: &StateIndex,
    batch: &EpisodeBatch,
    spec: &TargetSpec,
    center: f64,
    zeta: &[f64],
    pzeta: &[f64],
    x_star: &[u32],
) -> Targets {
    let mut t = Targets::default();
    for (q, ep) in batch.episodes.iter().enumerate() {
        let ids = &index.steps[q];
        let z: Vec<f64> = ids.iter().map(|&i| zeta[i as usize]).collect();
        let vals = match spec.algorithm {
            Algorithm::Standard => {
                let zero = vec![0.0; ids.len()];
                estimators::regenerative_targets(ep, center, &zero, &zero, x_star)
            }
            Algorithm::Amp => {
                let pz: Vec<f64> = ids[..ep.len()].iter().map(|&i| pzeta[i as usize]).collect();
                estimators::regenerative_targets(ep, center, &z, &pz, x_star)
            }
            Algorithm::Discounted => {
                let next: Vec<f64> = match spec.estimator.variant {
                    Variant::Gae => z[1..].to_vec(),
                    Variant::Amp => ids[..ep.len()].iter().map(|&i| pzeta[i as usize]).collect(),
                    Variant::Standard => vec![0.0; ep.len()],
                };
                let z = if spec.estimator.variant == Variant::Standard { vec![0.0; ids.len()] } else { z };
                let truncate = spec.estimator.target == ValueTarget::RegenerativeDiscounted;
                estimators::discounted_targets(ep, spec.horizon, &spec.estimator, center, &z, &next, truncate, x_star)
            }
        };
        for (k, v) in vals.into_iter().enumerate() {
            t.at.push((q, k));
            t.ids.push(ids[k]);
            t.values.push(v);
        }
    }
    t
}

/// Pooled within-state sample variance: `Σ_s Σ (v − v̄_s)² / Σ_s (n_s − 1)`.
pub fn pooled_variance(ids: &[u32], values: &[f64]) -> f64 {
    let mut groups: HashMap<u32, (usize, f64, f64)> = HashMap::new();
    for (&i, &v) in ids.iter().zip(values) {
        let g = groups.entry(i).or_insert((0, 0.0, 0.0));
        g.0 += 1;
        let d = v - g.1;
        g.1 += d / g.0 as f64;
        g.2 += d * (v - g.1);
    }
    let mut keys: Vec<_> = groups.keys().copied().collect();
    keys.sort_unstable();
    let (mut ss, mut dof) = (0.0, 0usize);
    for k in keys {
        let g = groups[&k];
        ss += g.2;
        dof += g.0 - 1;
    }
    if dof == 0 {
        0.0
    } else {
        ss / dof as f64
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Mlp,
    pub value: Mlp,
    pub reports: Vec<IterationReport>,
    /// Policy after iteration `i` for `i = 0, every, 2·every, …` and the final one.
    pub checkpoints: Vec<(usize, Mlp)>,
}

impl TrainOutcome {
    pub fn checkpoint_records(&self, spec: &ModelFile) -> Vec<(usize, Checkpoint)> {
        let last = self.checkpoints.last().map(|c| c.0);
        self.checkpoints
            .iter()
            .map(|(i, net)| {
                let value = if Some(*i) == last { Some(&self.value) } else { None };
                (*i, Checkpoint::new(*i, spec, net, value))
            })
            .collect()
    }
}

/// Initial policy network for `cfg`.
pub fn initial_policy<M: ControlModel + ?Sized>(model: &M, cfg: &TrainConfig) -> Result<Mlp> {
    let layout = model.layout();
    let arch = Architecture::policy(model.num_classes(), layout.num_stations(), layout.total());
    match &cfg.init {
        Initialization::Xavier => {
            let mut net = Mlp::xavier(&arch, &mut stream(cfg.seed, Purpose::Init, 0, 0));
            net.input_scale = cfg.policy_input_scale;
            Ok(net)
        }
        Initialization::ClonePr { states } => {
            let teacher = Policy::ProportionallyRandomized;
            let mut rng = stream(cfg.seed, Purpose::Init, 0, 1);
            let ep = run_steps(
                model,
                &mut teacher.runner(model),
                model.regeneration_state(),
                *states,
                StepMode::EveryTransition,
                &mut rng,
            );
            let xs = ep.visited();
            let targets: Vec<Vec<f64>> = par::map_slice(&xs, |x| teacher.action_law(model, x).probs);
            let clone_cfg = CloneConfig {
                minibatch: cfg.minibatch,
                input_scale: cfg.policy_input_scale,
                seed: cfg.seed,
                ..CloneConfig::default()
            };
            Ok(clone_from_teacher(model, &xs, &targets, &clone_cfg)?.0)
        }
    }
}

/// Runs the configured algorithm from `initial` (or the configured
/// initialization when `None`).
pub fn train<M: ControlModel + ?Sized>(model: &M, cfg: &TrainConfig, initial: Option<Mlp>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut policy = match initial {
        Some(p) => p,
        None => initial_policy(model, cfg)?,
    };
    let mut value = Mlp::xavier(&Architecture::value(model.num_classes()), &mut stream(cfg.seed, Purpose::Init, 0, 2));
    value.input_scale = cfg.value_input_scale;
    value.output_scale = cfg.value_output_scale;
    let mut policy_adam = Adam::new(policy.params().len());
    let mut value_adam = Adam::new(value.params().len());
    let x_star = model.regeneration_state().to_vec();
    let layout = model.layout();
    let total = layout.total();
    let est = cfg.estimator();
    let spec = TargetSpec { algorithm: cfg.algorithm, estimator: est, horizon: cfg.horizon };
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = vec![(0, policy.clone())];
    let mut pool: Option<Vec<State>> = None;
    let mut have_zeta = false;

    for i in 0..cfg.iterations {
        let behaviour = Policy::Neural(policy.clone());
        let plan = match cfg.algorithm {
            Algorithm::Standard | Algorithm::Amp => BatchPlan {
                actors: cfg.actors,
                budget: Budget::Cycles(cfg.cycles),
                mode: cfg.mode,
                initial_states: None,
                max_steps: cfg.max_steps,
            },
            Algorithm::Discounted => BatchPlan {
                actors: cfg.actors,
                budget: Budget::Steps(cfg.horizon + cfg.tail),
                mode: cfg.mode,
                initial_states: pool.take(),
                max_steps: cfg.max_steps,
            },
        };
        let batch = generate_batch(model, &behaviour, &plan, cfg.seed, i)
            .map_err(|e| Error::UnstablePolicy { iteration: i, source: Box::new(e) })?;

        let (avg, center, gamma) = match cfg.algorithm {
            Algorithm::Standard | Algorithm::Amp => {
                let a = estimators::avg_cost(&batch)?;
                (a, a, 1.0)
            }
            Algorithm::Discounted => {
                let a = estimators::avg_cost_steps(&batch)?;
                let c = match cfg.target {
                    ValueTarget::RegenerativeDiscounted => estimators::r_star(&batch, &x_star, cfg.gamma, cfg.tail)?,
                    ValueTarget::InfiniteDiscounted => a,
                };
                (a, c, cfg.gamma)
            }
        };

        let index = StateIndex::build(model, &batch);
        let laws = index.laws(model, &behaviour);
        let (zeta, pzeta) = if have_zeta {
            let z = index.centred_values(&value);
            let pz = index.expected_next(model, &laws, &z);
            (z, pz)
        } else {
            (vec![0.0; index.len()], vec![0.0; index.visited])
        };
        let targets = compute_targets(&index, &batch, &spec, center, &zeta, &pzeta, &x_star);
        if targets.values.is_empty() {
            return Err(Error::InsufficientData(format!("iteration {i} produced no samples")));
        }
        let target_variance = pooled_variance(&targets.ids, &targets.values);
        let fit_states: Vec<State> = targets.ids.iter().map(|&id| index.states[id as usize].clone()).collect();
        let value_losses = fit_value(
            &mut value,
            &mut value_adam,
            &fit_states,
            &targets.values,
            cfg.epochs,
            cfg.minibatch,
            cfg.value_lr,
            cfg.seed,
            i,
        )?;
        have_zeta = true;

        let fitted = index.centred_values(&value);
        let samples: Vec<SurrogateSample> = par::map_range(targets.at.len(), |s| {
            let (q, k) = targets.at[s];
            let ep = &batch.episodes[q];
            let id = targets.ids[s] as usize;
            let x = &index.states[id];
            let action = ep.action(k).to_vec();
            let mut moves = Vec::new();
            mdp::action_moves(model, x, &action, &mut moves);
            let pv = mdp::expect_moves(x, &moves, &mut Vec::new(), |y| fitted[index.id(y).unwrap() as usize]);
            let advantage = model.cost(x) - center + gamma * pv - fitted[id];
            let log_prob_old =
                law_log_prob(layout, &laws[id * total..(id + 1) * total], &action).unwrap_or(f64::NEG_INFINITY);
            SurrogateSample { state: x.clone(), action, advantage, log_prob_old }
        });
        if samples.iter().any(|s| !s.log_prob_old.is_finite()) {
            return Err(Error::NonFiniteLoss(i));
        }

        let eps = cfg.clip_at(i);
        let lr = cfg.policy_lr_at(i);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let (mut surrogate, mut clipped, mut seen) = (0.0, 0usize, 0usize);
        for e in 0..cfg.epochs {
            order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, i as u64, 2 * e as u64));
            for mb in order.chunks(cfg.minibatch) {
                let (loss, grad, c) = clipped_surrogate(model, &policy, &samples, mb, eps);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss(i));
                }
                let m = mb.len() as f64;
                let grad: Vec<f64> = grad.iter().map(|g| g / m).collect();
                policy_adam.step(policy.params_mut(), &grad, lr);
                if e + 1 == cfg.epochs {
                    surrogate += loss;
                    clipped += c;
                    seen += mb.len();
                }
            }
        }
        policy.check_finite().map_err(|_| Error::NonFiniteLoss(i))?;
        value.check_finite().map_err(|_| Error::NonFiniteLoss(i))?;

        if cfg.algorithm == Algorithm::Discounted {
            let mut rng = stream(cfg.seed, Purpose::Pool, i as u64, 0);
            let steps = batch.total_steps();
            let mut picks = Vec::with_capacity(cfg.actors);
            for q in 0..cfg.actors {
                if q < cfg.anchored_actors {
                    picks.push(x_star.clone());
                    continue;
                }
                let mut r = rng.gen_range(0..steps);
                let ep = batch.episodes.iter().find(|e| {
                    if r < e.len() {
                        true
                    } else {
                        r -= e.len();
                        false
                    }
                });
                picks.push(ep.map(|e| e.state(r).to_vec()).unwrap_or_else(|| x_star.clone()));
            }
            pool = Some(picks);
        }

        reports.push(IterationReport {
            iteration: i,
            samples: samples.len(),
            avg_cost: avg,
            center,
            value_loss: *value_losses.last().unwrap(),
            surrogate_loss: surrogate / seen.max(1) as f64,
            clip_fraction: clipped as f64 / seen.max(1) as f64,
            target_variance,
            clip: eps,
            policy_lr: lr,
        });
        if (i + 1) % cfg.checkpoint_every.max(1) == 0 || i + 1 == cfg.iterations {
            checkpoints.push((i + 1, policy.clone()));
        }
    }
    Ok(TrainOutcome { policy, value, reports, checkpoints })
}

/// Masked softmax of a policy network at `x`.
pub fn policy_law<M: ControlModel + ?Sized>(model: &M, net: &Mlp, x: &[u32]) -> Vec<f64> {
    let mut ws = Workspace::default();
    let logits = net.forward_state(x, &mut ws).to_vec();
    let mut out = vec![0.0; logits.len()];
    masked_softmax(model, x, &logits, &mut out);
    out
}
