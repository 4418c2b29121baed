//! Randomized stationary policies.
//!
//! A law assigns each station a distribution over its choices (idle or a
//! servable class). The neural policy emits one logit per choice, applies a
//! per-station softmax and moves the mass of empty-buffer classes onto idle,
//! which is what the kernel does with such actions anyway.

use crate::error::{Error, Result};
use crate::mdp::{Choice, ControlModel, LawSource, Layout, State};
use crate::network::ModelFile;
use crate::nn::{Adam, Architecture, Mlp, Workspace};
use crate::rng::{stream, Purpose, Rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Flattened per-station probabilities, laid out as in [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ActionLaw {
    pub probs: Vec<f64>,
}

impl ActionLaw {
    pub fn station<'a>(&'a self, layout: &Layout, station: usize) -> &'a [f64] {
        &self.probs[layout.range(station)]
    }
}

/// The policies used in the experiments.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Neural(Mlp),
    ProportionallyRandomized,
    /// Serve the first nonempty class of the ranking present at each station.
    StaticPriority(Vec<usize>),
    /// N-model: the flexible server favours class 1 iff x₁ > T.
    Threshold(u32),
    UniformRandom,
}

impl Policy {
    /// Last-buffer-first-served: higher class index first.
    pub fn lbfs(num_classes: usize) -> Policy {
        Policy::StaticPriority((0..num_classes).rev().collect())
    }

    pub fn name(&self) -> String {
        match self {
            Policy::Neural(_) => "neural".into(),
            Policy::ProportionallyRandomized => "pr".into(),
            Policy::StaticPriority(r) => format!("priority:{r:?}"),
            Policy::Threshold(t) => format!("threshold:{t}"),
            Policy::UniformRandom => "uniform".into(),
        }
    }

    /// Writes the law at `x` into `out`.
    pub fn law_into<M: ControlModel + ?Sized>(&self, model: &M, x: &[u32], out: &mut [f64], ws: &mut Workspace) {
        let layout = model.layout();
        out.iter_mut().for_each(|p| *p = 0.0);
        match self {
            Policy::Neural(net) => {
                let input: Vec<f64> = x.iter().map(|&v| v as f64).collect();
                let logits = net.forward_ws(&input, ws);
                masked_softmax(model, x, logits, out);
            }
            Policy::ProportionallyRandomized => {
                for l in 0..layout.num_stations() {
                    let r = layout.range(l);
                    let choices = layout.choices(l);
                    let total: u64 = choices
                        .iter()
                        .enumerate()
                        .filter(|&(c, _)| model.is_feasible(x, l, c))
                        .map(|(_, ch)| match ch {
                            Choice::Serve(j) => x[*j] as u64,
                            Choice::Idle => 0,
                        })
                        .sum();
                    if total == 0 {
                        fallback(model, x, l, &mut out[r]);
                        continue;
                    }
                    for (c, ch) in choices.iter().enumerate() {
                        if let Choice::Serve(j) = ch {
                            if model.is_feasible(x, l, c) {
                                out[r.start + c] = x[*j] as f64 / total as f64;
                            }
                        }
                    }
                }
            }
            Policy::StaticPriority(ranking) => {
                for l in 0..layout.num_stations() {
                    let r = layout.range(l);
                    let choices = layout.choices(l);
                    let pick = ranking.iter().find_map(|&j| {
                        choices
                            .iter()
                            .position(|ch| *ch == Choice::Serve(j))
                            .filter(|&c| model.is_feasible(x, l, c) && x[j] >= 1)
                    });
                    match pick {
                        Some(c) => out[r.start + c] = 1.0,
                        None => fallback(model, x, l, &mut out[r]),
                    }
                }
            }
            Policy::Threshold(t) => {
                for l in 0..layout.num_stations() {
                    let r = layout.range(l);
                    let choices = layout.choices(l);
                    let first = choices.iter().position(|c| *c == Choice::Serve(0));
                    let second = choices.iter().position(|c| *c == Choice::Serve(1));
                    match (first, second) {
                        (Some(a), Some(b)) => out[r.start + if x[0] > *t { a } else { b }] = 1.0,
                        _ => out[r.start] = 1.0,
                    }
                }
            }
            Policy::UniformRandom => {
                for l in 0..layout.num_stations() {
                    let r = layout.range(l);
                    let n = (0..r.len()).filter(|&c| model.is_feasible(x, l, c)).count();
                    for c in 0..r.len() {
                        if model.is_feasible(x, l, c) {
                            out[r.start + c] = 1.0 / n as f64;
                        }
                    }
                }
            }
        }
    }

    pub fn action_law<M: ControlModel + ?Sized>(&self, model: &M, x: &[u32]) -> ActionLaw {
        let mut probs = vec![0.0; model.layout().total()];
        self.law_into(model, x, &mut probs, &mut Workspace::default());
        ActionLaw { probs }
    }

    /// A law source bound to a model, with its own scratch space.
    pub fn runner<'a, M: ControlModel + ?Sized>(&'a self, model: &'a M) -> PolicyRunner<'a, M> {
        PolicyRunner { policy: self, model, ws: Workspace::default() }
    }
}

/// Law of a station with nothing to serve: idle if available, else uniform.
fn fallback<M: ControlModel + ?Sized>(model: &M, x: &[u32], station: usize, out: &mut [f64]) {
    match model.layout().idle(station) {
        Some(i) => out[i] = 1.0,
        None => {
            let n = (0..out.len()).filter(|&c| model.is_feasible(x, station, c)).count().max(1);
            for (c, o) in out.iter_mut().enumerate() {
                if model.is_feasible(x, station, c) {
                    *o = 1.0 / n as f64;
                }
            }
        }
    }
}

/// Per-station softmax of `logits`, with infeasible mass moved to idle.
pub fn masked_softmax<M: ControlModel + ?Sized>(model: &M, x: &[u32], logits: &[f64], out: &mut [f64]) {
    let layout = model.layout();
    for l in 0..layout.num_stations() {
        let r = layout.range(l);
        let z = &logits[r.clone()];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out[r.clone()].iter_mut().zip(z) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in &mut out[r.clone()] {
            *o /= sum;
        }
        if let Some(idle) = layout.idle(l) {
            for c in 0..r.len() {
                if c != idle && !model.is_feasible(x, l, c) {
                    out[r.start + idle] += out[r.start + c];
                    out[r.start + c] = 0.0;
                }
            }
        }
    }
}

/// Log-probability of `action` under the masked softmax of `logits`, and
/// its gradient with respect to the logits written into `dlogits`.
pub fn masked_log_prob_grad<M: ControlModel + ?Sized>(
    model: &M,
    x: &[u32],
    logits: &[f64],
    action: &[u8],
    dlogits: &mut [f64],
) -> f64 {
    let layout = model.layout();
    let mut logp = 0.0;
    for l in 0..layout.num_stations() {
        let r = layout.range(l);
        let z = &logits[r.clone()];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = s.iter().sum();
        let a = action[l] as usize;
        let idle = layout.idle(l);
        let in_group = |c: usize| {
            if c == a {
                return true;
            }
            Some(a) == idle && !model.is_feasible(x, l, c)
        };
        let pg: f64 = (0..r.len()).filter(|&c| in_group(c)).map(|c| s[c]).sum::<f64>() / total;
        logp += pg.ln();
        for c in 0..r.len() {
            let sc = s[c] / total;
            let own = if in_group(c) { sc / pg } else { 0.0 };
            dlogits[r.start + c] = own - sc;
        }
    }
    logp
}

/// Σ over stations of the log of the chosen entry's probability.
pub fn log_prob<M: ControlModel + ?Sized>(policy: &Policy, model: &M, x: &[u32], action: &[u8]) -> Result<f64> {
    let law = policy.action_law(model, x);
    law_log_prob(model.layout(), &law.probs, action)
}

pub fn law_log_prob(layout: &Layout, law: &[f64], action: &[u8]) -> Result<f64> {
    let mut total = 0.0;
    for (l, &a) in action.iter().enumerate() {
        let p = law[layout.offset(l) + a as usize];
        if p <= 0.0 {
            return Err(Error::ZeroProbabilityAction { station: l });
        }
        total += p.ln();
    }
    Ok(total)
}

/// A policy bound to its model, usable as a [`LawSource`].
pub struct PolicyRunner<'a, M: ControlModel + ?Sized> {
    policy: &'a Policy,
    model: &'a M,
    ws: Workspace,
}

impl<M: ControlModel + ?Sized> LawSource for PolicyRunner<'_, M> {
    fn law_into(&mut self, x: &[u32], out: &mut [f64]) {
        self.policy.law_into(self.model, x, out, &mut self.ws);
    }
}

/// Memoizes laws per state; worthwhile for expensive policies on long runs.
pub struct CachedLaws<S: LawSource> {
    inner: S,
    cache: HashMap<State, Vec<f64>>,
    capacity: usize,
}

impl<S: LawSource> CachedLaws<S> {
    pub fn new(inner: S, capacity: usize) -> Self {
        Self { inner, cache: HashMap::new(), capacity }
    }
}

impl<S: LawSource> LawSource for CachedLaws<S> {
    fn law_into(&mut self, x: &[u32], out: &mut [f64]) {
        if let Some(p) = self.cache.get(x) {
            out.copy_from_slice(p);
            return;
        }
        self.inner.law_into(x, out);
        if self.cache.len() < self.capacity {
            self.cache.insert(x.to_vec(), out.to_vec());
        }
    }
}

/// Settings for behaviour cloning.
#[derive(Clone, Debug)]
pub struct CloneConfig {
    pub learning_rate: f64,
    pub minibatch: usize,
    pub max_epochs: usize,
    /// Stop once the held-out KL divergence falls below this.
    pub target_kl: f64,
    pub input_scale: f64,
    pub seed: u64,
}

impl Default for CloneConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, minibatch: 2048, max_epochs: 200, target_kl: 0.01, input_scale: 1.0, seed: 0 }
    }
}

/// Outcome of behaviour cloning.
#[derive(Clone, Debug)]
pub struct CloneReport {
    pub epochs: usize,
    pub train_loss: f64,
    pub heldout_kl: f64,
}

/// Mean KL(target ‖ student) over `states`.
pub fn mean_kl<M: ControlModel + ?Sized>(model: &M, net: &Mlp, states: &[State], targets: &[Vec<f64>]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let student = Policy::Neural(net.clone());
    let total = crate::par::sum_range(states.len(), |i| {
        let law = student.action_law(model, &states[i]);
        targets[i]
            .iter()
            .zip(&law.probs)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, p)| t * (t.ln() - p.max(1e-300).ln()))
            .sum::<f64>()
    });
    total / states.len() as f64
}

/// Fits a policy network to teacher laws by minibatch Adam on cross-entropy.
///
/// A random 10% of the states is held out; training stops when the mean
/// held-out KL divergence drops below `cfg.target_kl` or after `max_epochs`.
pub fn clone_from_teacher<M: ControlModel + ?Sized>(
    model: &M,
    states: &[State],
    targets: &[Vec<f64>],
    cfg: &CloneConfig,
) -> Result<(Mlp, CloneReport)> {
    if states.len() < 2 || states.len() != targets.len() {
        return Err(Error::InsufficientData("cloning needs at least two labelled states".into()));
    }
    let layout = model.layout();
    let arch = Architecture::policy(model.num_classes(), layout.num_stations(), layout.total());
    let mut net = Mlp::xavier(&arch, &mut stream(cfg.seed, Purpose::Init, 0, 7));
    net.input_scale = cfg.input_scale;
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.shuffle(&mut stream(cfg.seed, Purpose::Split, 0, 0));
    let held = (states.len() / 10).max(1);
    let (test_idx, train_idx) = order.split_at(held);
    let test_states: Vec<State> = test_idx.iter().map(|&i| states[i].clone()).collect();
    let test_targets: Vec<Vec<f64>> = test_idx.iter().map(|&i| targets[i].clone()).collect();
    let mut train: Vec<usize> = train_idx.to_vec();
    let mut adam = Adam::new(net.params().len());
    let mut report = CloneReport { epochs: 0, train_loss: f64::NAN, heldout_kl: f64::INFINITY };
    for epoch in 0..cfg.max_epochs {
        train.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64, 7));
        let mut epoch_loss = 0.0;
        for mb in train.chunks(cfg.minibatch.max(1)) {
            let (loss, grad) = cross_entropy_gradient(model, &net, mb, states, targets);
            let m = mb.len() as f64;
            let grad: Vec<f64> = grad.iter().map(|g| g / m).collect();
            adam.step(net.params_mut(), &grad, cfg.learning_rate);
            epoch_loss += loss;
        }
        report.epochs = epoch + 1;
        report.train_loss = epoch_loss / train.len() as f64;
        report.heldout_kl = mean_kl(model, &net, &test_states, &test_targets);
        if report.heldout_kl < cfg.target_kl {
            break;
        }
    }
    net.check_finite()?;
    Ok((net, report))
}

fn cross_entropy_gradient<M: ControlModel + ?Sized>(
    model: &M,
    net: &Mlp,
    batch: &[usize],
    states: &[State],
    targets: &[Vec<f64>],
) -> (f64, Vec<f64>) {
    let layout = model.layout();
    let total = layout.total();
    net.batch_gradient(
        batch.len(),
        |i, buf| buf.extend(states[batch[i]].iter().map(|&v| v as f64)),
        |i, logits, dout| {
            let x = &states[batch[i]];
            let t = &targets[batch[i]];
            let mut p = vec![0.0; total];
            masked_softmax(model, x, logits, &mut p);
            let mut loss = 0.0;
            for l in 0..layout.num_stations() {
                let r = layout.range(l);
                let z = &logits[r.clone()];
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                let idle = layout.idle(l);
                for c in 0..r.len() {
                    let s = (z[c] - max).exp() / sum;
                    let group = if idle.is_some() && !model.is_feasible(x, l, c) { idle.unwrap() } else { c };
                    let pg = p[r.start + group];
                    let tg = t[r.start + group];
                    dout[r.start + c] = if pg > 0.0 { s - tg * s / pg } else { s };
                    if group == c && tg > 0.0 {
                        loss -= tg * pg.max(1e-300).ln();
                    }
                }
            }
            loss
        },
    )
}

/// One layer of a serialized network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Self-describing serialized network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub activation: String,
    pub input_scale: f64,
    #[serde(default = "one")]
    pub output_scale: f64,
    pub layers: Vec<LayerRecord>,
}

impl NetworkRecord {
    pub fn from_mlp(net: &Mlp) -> Self {
        let layers = (0..net.num_layers())
            .map(|k| LayerRecord {
                rows: net.sizes()[k + 1],
                cols: net.sizes()[k],
                weights: net.weights(k).to_vec(),
                bias: net.bias(k).to_vec(),
            })
            .collect();
        Self { activation: "tanh".into(), input_scale: net.input_scale, output_scale: net.output_scale, layers }
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        let mut sizes = vec![self.layers.first().map(|l| l.cols).unwrap_or(0)];
        sizes.extend(self.layers.iter().map(|l| l.rows));
        let layers: Vec<_> = self.layers.iter().map(|l| (l.weights.clone(), l.bias.clone())).collect();
        let mut net = Mlp::from_layers(sizes, &layers, self.input_scale)?;
        net.output_scale = self.output_scale;
        Ok(net)
    }
}

fn one() -> f64 {
    1.0
}

/// Policy (and optionally value) parameters at one training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub iteration: usize,
    pub network_name: String,
    pub network_fingerprint: String,
    pub policy: NetworkRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<NetworkRecord>,
}

pub const CHECKPOINT_FORMAT: &str = "qnppo-checkpoint-v1";

impl Checkpoint {
    pub fn new(iteration: usize, spec: &ModelFile, policy: &Mlp, value: Option<&Mlp>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            iteration,
            network_name: spec.name().into(),
            network_fingerprint: spec.fingerprint(),
            policy: NetworkRecord::from_mlp(policy),
            value: value.map(NetworkRecord::from_mlp),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The policy network, after checking it was trained on `spec`.
    pub fn policy_for(&self, spec: &ModelFile) -> Result<Mlp> {
        if self.network_fingerprint != spec.fingerprint() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint trained on {} ({})",
                self.network_name, self.network_fingerprint
            )));
        }
        self.policy.to_mlp()
    }
}

/// Samples an action from a law; re-exported for callers outside the simulator.
pub fn sample_action(layout: &Layout, law: &ActionLaw, rng: &mut Rng) -> Vec<u8> {
    let mut a = vec![0; layout.num_stations()];
    crate::mdp::sample_action(layout, &law.probs, rng, &mut a);
    a
}
