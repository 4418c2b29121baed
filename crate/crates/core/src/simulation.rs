//! Episode generation.
//!
//! Episodes either run a fixed number of regenerative cycles from the
//! regeneration state or a fixed number of steps from a given state. A batch
//! runs one episode per actor, each on its own random stream, and returns
//! them ordered by actor index.

use crate::error::{Error, Result};
use crate::mdp::{is_regeneration, ControlModel, LawSource, State, StepMode, Stepper};
use crate::network::CompiledNetwork;
use crate::par;
use crate::policy::{CachedLaws, Policy};
use crate::rng::{actor_stream, Rng};
use rand::Rng as _;
use std::collections::VecDeque;
use std::io::Write;

/// Default per-actor step cap in cycles mode.
pub const DEFAULT_MAX_STEPS: usize = 10_000_000;

/// Laws cached per actor before the cache stops growing.
pub const LAW_CACHE_CAPACITY: usize = 200_000;

/// One actor's trajectory.
///
/// `states` holds `len() + 1` rows: the visited states followed by the state
/// reached by the last transition. Actions, costs and flags have `len()` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub num_classes: usize,
    pub num_stations: usize,
    pub states: Vec<u32>,
    pub actions: Vec<u8>,
    pub costs: Vec<f64>,
    pub fictitious: Vec<bool>,
    /// Steps `k ≥ 1` at which the chain sits in the regeneration state.
    pub regenerations: Vec<usize>,
    pub actor: usize,
    pub seed: u64,
}

impl Episode {
    fn start(num_classes: usize, num_stations: usize, x0: &[u32], actor: usize, seed: u64) -> Self {
        Self {
            num_classes,
            num_stations,
            states: x0.to_vec(),
            actions: Vec::new(),
            costs: Vec::new(),
            fictitious: Vec::new(),
            regenerations: Vec::new(),
            actor,
            seed,
        }
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    /// State at step `k`, for `k ≤ len()`.
    pub fn state(&self, k: usize) -> &[u32] {
        &self.states[k * self.num_classes..(k + 1) * self.num_classes]
    }

    pub fn action(&self, k: usize) -> &[u8] {
        &self.actions[k * self.num_stations..(k + 1) * self.num_stations]
    }

    /// Visited states, excluding the final one.
    pub fn visited(&self) -> Vec<State> {
        (0..self.len()).map(|k| self.state(k).to_vec()).collect()
    }

    /// `regen[k]` is true when step `k` (0 ≤ k ≤ len) is at the regeneration state.
    pub fn regeneration_flags(&self, x_star: &[u32]) -> Vec<bool> {
        (0..=self.len()).map(|k| self.state(k) == x_star).collect()
    }

    /// Complete cycles as `(start, end)` step ranges between consecutive returns,
    /// the first one starting at step 0. Only meaningful for cycle-mode episodes.
    pub fn cycles(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.regenerations.len());
        let mut start = 0;
        for &s in &self.regenerations {
            out.push((start, s));
            start = s;
        }
        out
    }

    /// Writes the episode as CSV: step, state…, action…, cost, fictitious, regen.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend((0..self.num_classes).map(|j| format!("x{j}")));
        header.extend((0..self.num_stations).map(|l| format!("a{l}")));
        header.extend(["cost", "fictitious", "regen"].map(String::from));
        w.write_record(&header)?;
        let mut next = self.regenerations.iter().peekable();
        for k in 0..self.len() {
            let regen = if next.peek() == Some(&&(k + 1)) {
                next.next();
                1
            } else {
                0
            };
            let mut row = vec![k.to_string()];
            row.extend(self.state(k).iter().map(|v| v.to_string()));
            row.extend(self.action(k).iter().map(|v| v.to_string()));
            row.push(format!("{}", self.costs[k]));
            row.push((self.fictitious[k] as u8).to_string());
            row.push(regen.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Episodes ordered by actor index.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
}

impl EpisodeBatch {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }
}

fn push_step<M: ControlModel + ?Sized>(
    ep: &mut Episode,
    model: &M,
    stepper: &mut Stepper<'_, M>,
    policy: &mut (impl LawSource + ?Sized),
    x: &mut State,
    rng: &mut Rng,
) -> bool {
    let out = stepper.step(policy, x, rng);
    ep.actions.extend_from_slice(stepper.action());
    ep.costs.push(out.cost);
    ep.fictitious.push(out.fictitious);
    ep.states.extend_from_slice(x);
    let regen = is_regeneration(model, x);
    if regen {
        ep.regenerations.push(ep.costs.len());
    }
    regen
}

/// Runs from the regeneration state until the `n_cycles`-th return.
pub fn run_cycles<M: ControlModel + ?Sized>(
    model: &M,
    policy: &mut (impl LawSource + ?Sized),
    n_cycles: usize,
    mode: StepMode,
    rng: &mut Rng,
    max_steps: usize,
) -> Result<Episode> {
    let x_star = model.regeneration_state().to_vec();
    let mut ep = Episode::start(model.num_classes(), model.num_stations(), &x_star, 0, 0);
    let mut stepper = Stepper::new(model, mode);
    let mut x = x_star;
    let mut done = 0;
    while done < n_cycles {
        if ep.len() >= max_steps {
            return Err(Error::CycleBudgetExceeded(max_steps));
        }
        if push_step(&mut ep, model, &mut stepper, policy, &mut x, rng) {
            done += 1;
        }
    }
    Ok(ep)
}

/// Runs exactly `n_steps` transitions from `x0`.
pub fn run_steps<M: ControlModel + ?Sized>(
    model: &M,
    policy: &mut (impl LawSource + ?Sized),
    x0: &[u32],
    n_steps: usize,
    mode: StepMode,
    rng: &mut Rng,
) -> Episode {
    let mut ep = Episode::start(model.num_classes(), model.num_stations(), x0, 0, 0);
    ep.states.reserve(n_steps * model.num_classes());
    ep.costs.reserve(n_steps);
    let mut stepper = Stepper::new(model, mode);
    let mut x = x0.to_vec();
    for _ in 0..n_steps {
        push_step(&mut ep, model, &mut stepper, policy, &mut x, rng);
    }
    ep
}

/// Per-actor episode length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Cycles(usize),
    Steps(usize),
}

/// How to generate one batch.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub actors: usize,
    pub budget: Budget,
    pub mode: StepMode,
    /// Start state per actor in steps mode; `None` starts every actor at x*.
    pub initial_states: Option<Vec<State>>,
    pub max_steps: usize,
}

/// Runs one episode per actor; actor `q` of `iteration` uses its own stream.
pub fn generate_batch<M: ControlModel + ?Sized>(
    model: &M,
    policy: &Policy,
    plan: &BatchPlan,
    seed: u64,
    iteration: usize,
) -> Result<EpisodeBatch> {
    let episodes = par::map_range(plan.actors, |q| {
        let mut rng = actor_stream(seed, q, iteration);
        let mut source = CachedLaws::new(policy.runner(model), LAW_CACHE_CAPACITY);
        let res = match plan.budget {
            Budget::Cycles(n) => run_cycles(model, &mut source, n, plan.mode, &mut rng, plan.max_steps),
            Budget::Steps(n) => {
                let x0 = match &plan.initial_states {
                    Some(pool) => pool[q].clone(),
                    None => model.regeneration_state().to_vec(),
                };
                Ok(run_steps(model, &mut source, &x0, n, plan.mode, &mut rng))
            }
        };
        res.map(|mut e| {
            e.actor = q;
            e.seed = seed;
            e
        })
        .map_err(|e| Error::Actor { actor: q, source: Box::new(e) })
    });
    Ok(EpisodeBatch { episodes: episodes.into_iter().collect::<Result<Vec<_>>>()? })
}

/// Streaming accumulator for long runs of unknown length.
///
/// Step costs are summed in blocks; whenever `MAX_BLOCKS` blocks are full,
/// neighbours are merged and the block size doubles. Any run of at least
/// `MAX_BLOCKS / 2` steps can then be split into up to 64 equal batches of
/// whole blocks with at most one batch's worth of blocks left over.
#[derive(Clone, Debug)]
pub struct BlockSums {
    pub block: usize,
    pub sums: Vec<f64>,
    partial: f64,
    filled: usize,
    pub steps: usize,
    pub total: f64,
}

impl Default for BlockSums {
    fn default() -> Self {
        Self { block: 1, sums: Vec::new(), partial: 0.0, filled: 0, steps: 0, total: 0.0 }
    }
}

impl BlockSums {
    pub const MAX_BLOCKS: usize = 6400;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, cost: f64) {
        self.partial += cost;
        self.total += cost;
        self.filled += 1;
        self.steps += 1;
        if self.filled == self.block {
            self.sums.push(self.partial);
            self.partial = 0.0;
            self.filled = 0;
            if self.sums.len() == Self::MAX_BLOCKS {
                self.sums = self.sums.chunks(2).map(|c| c[0] + c[1]).collect();
                self.block *= 2;
            }
        }
    }

    /// Averages of `k` equal consecutive batches of whole blocks, or `None`
    /// when there are fewer than `k` blocks.
    pub fn batch_means(&self, k: usize) -> Option<Vec<f64>> {
        let per = self.sums.len() / k.max(1);
        if per == 0 {
            return None;
        }
        let len = (per * self.block) as f64;
        Some(self.sums.chunks(per).take(k).map(|c| c.iter().sum::<f64>() / len).collect())
    }

    pub fn mean(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.total / self.steps as f64
        }
    }
}

/// First-come-first-served order: by time of entry to the network, or by time
/// of entry to the current buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FcfsOrder {
    SystemArrival,
    BufferArrival,
}

/// Result of an FCFS run.
#[derive(Clone, Debug)]
pub struct FcfsRun {
    pub average_cost: f64,
    pub blocks: BlockSums,
    pub arrivals: usize,
}

/// Simulates the uniformized network under FCFS until `num_arrivals` external
/// arrivals. Each station serves the head-of-line job with the smallest stamp.
pub fn run_fcfs_eval(net: &CompiledNetwork, num_arrivals: usize, order: FcfsOrder, rng: &mut Rng) -> FcfsRun {
    let j = net.lambda.len();
    let b = net.uniformization_rate();
    let stations = net.layout().num_stations();
    let at: Vec<Vec<usize>> = (0..stations).map(|s| net.classes_at(s)).collect();
    let mut queues: Vec<VecDeque<u64>> = vec![VecDeque::new(); j];
    let mut blocks = BlockSums::new();
    let mut counts = vec![0u32; j];
    let mut arrivals = 0usize;
    let mut step: u64 = 0;
    let lam: Vec<f64> = net.lambda.iter().map(|l| l / b).collect();
    let mut serving = vec![usize::MAX; stations];
    while arrivals < num_arrivals {
        for (c, q) in counts.iter_mut().zip(&queues) {
            *c = q.len() as u32;
        }
        blocks.push(net.cost(&counts));
        for (s, classes) in at.iter().enumerate() {
            serving[s] = classes
                .iter()
                .filter(|&&c| !queues[c].is_empty())
                .min_by_key(|&&c| (queues[c][0], c))
                .copied()
                .unwrap_or(usize::MAX);
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut done = false;
        for c in 0..j {
            acc += lam[c];
            if u < acc {
                queues[c].push_back(step);
                arrivals += 1;
                done = true;
                break;
            }
        }
        if !done {
            'outer: for &c in serving.iter().filter(|&&c| c != usize::MAX) {
                for &(m, p) in net.service_moves(c) {
                    acc += p;
                    if u < acc {
                        let stamp = queues[c].pop_front().unwrap();
                        if let crate::mdp::Move::Route(_, k) = m {
                            let s = if order == FcfsOrder::SystemArrival { stamp } else { step };
                            queues[k].push_back(s);
                        }
                        break 'outer;
                    }
                }
            }
        }
        step += 1;
    }
    FcfsRun { average_cost: blocks.mean(), blocks, arrivals }
}
