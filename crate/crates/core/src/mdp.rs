//! Controlled Markov chains in uniformized form.
//!
//! A model lists, for each state, the unit moves that happen regardless of
//! the action (arrivals) and the extra moves unlocked by each station's
//! choice (service completions). Probabilities are already divided by the
//! uniformization constant; whatever mass is left is the fictitious self-loop.
//! This decomposition makes exact expectations under a randomized policy and
//! Bellman minimization separable across stations.

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Jobcount vector indexed by class.
pub type State = Vec<u32>;

/// What a station may do: idle, or work on a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    Idle,
    Serve(usize),
}

/// A single unit change of the jobcount vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Stay,
    Arrive(usize),
    Depart(usize),
    Route(usize, usize),
}

impl Move {
    pub fn apply(self, x: &mut [u32]) {
        match self {
            Move::Stay => {}
            Move::Arrive(j) => x[j] += 1,
            Move::Depart(j) => x[j] -= 1,
            Move::Route(j, k) => {
                x[j] -= 1;
                x[k] += 1;
            }
        }
    }

    pub fn applied(self, x: &[u32]) -> State {
        let mut y = x.to_vec();
        self.apply(&mut y);
        y
    }

    pub fn is_arrival(self) -> bool {
        matches!(self, Move::Arrive(_))
    }
}

/// Per-station choice lists flattened into one index space.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    stations: Vec<Vec<Choice>>,
    offsets: Vec<usize>,
    idle: Vec<Option<usize>>,
    total: usize,
}

impl Layout {
    pub fn new(stations: Vec<Vec<Choice>>) -> Self {
        let mut offsets = Vec::with_capacity(stations.len());
        let mut total = 0;
        for s in &stations {
            offsets.push(total);
            total += s.len();
        }
        let idle = stations.iter().map(|s| s.iter().position(|c| *c == Choice::Idle)).collect();
        Self { stations, offsets, idle, total }
    }

    pub fn num_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn choices(&self, station: usize) -> &[Choice] {
        &self.stations[station]
    }

    pub fn offset(&self, station: usize) -> usize {
        self.offsets[station]
    }

    pub fn range(&self, station: usize) -> std::ops::Range<usize> {
        self.offsets[station]..self.offsets[station] + self.stations[station].len()
    }

    /// Index of the idle choice within the station, if it has one.
    pub fn idle(&self, station: usize) -> Option<usize> {
        self.idle[station]
    }

    /// Total number of choices across stations.
    pub fn total(&self) -> usize {
        self.total
    }
}

/// Version-1 and version-2 sampling semantics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepMode {
    /// Re-sample the action after every transition.
    EveryTransition,
    /// Keep the previous action after a fictitious transition.
    RealTransitionsOnly,
}

/// A controlled chain in uniformized form.
pub trait ControlModel: Sync {
    fn num_classes(&self) -> usize;

    fn layout(&self) -> &Layout;

    /// One-step cost charged on the pre-transition state.
    fn cost(&self, x: &[u32]) -> f64;

    fn regeneration_state(&self) -> &[u32];

    /// Appends moves that happen whatever the action.
    fn base_moves(&self, x: &[u32], out: &mut Vec<(Move, f64)>);

    /// Appends moves unlocked by `station` taking its `choice`-th option.
    /// Infeasible choices contribute nothing.
    fn choice_moves(&self, x: &[u32], station: usize, choice: usize, out: &mut Vec<(Move, f64)>);

    fn is_feasible(&self, x: &[u32], station: usize, choice: usize) -> bool {
        match self.layout().choices(station)[choice] {
            Choice::Idle => true,
            Choice::Serve(j) => x[j] >= 1,
        }
    }

    fn num_stations(&self) -> usize {
        self.layout().num_stations()
    }
}

/// Supplies action laws (flattened per [`Layout`]) for states.
pub trait LawSource {
    fn law_into(&mut self, x: &[u32], out: &mut [f64]);
}

pub fn is_regeneration<M: ControlModel + ?Sized>(model: &M, x: &[u32]) -> bool {
    x == model.regeneration_state()
}

/// Feasible choice indices per station.
pub fn action_set<M: ControlModel + ?Sized>(model: &M, x: &[u32]) -> Vec<Vec<usize>> {
    (0..model.num_stations())
        .map(|l| (0..model.layout().choices(l).len()).filter(|&c| model.is_feasible(x, l, c)).collect())
        .collect()
}

/// Real moves under a joint action (one choice index per station).
pub fn action_moves<M: ControlModel + ?Sized>(model: &M, x: &[u32], action: &[u8], out: &mut Vec<(Move, f64)>) {
    out.clear();
    model.base_moves(x, out);
    for (l, &c) in action.iter().enumerate() {
        model.choice_moves(x, l, c as usize, out);
    }
}

/// Real moves under a randomized law, weighted by the law.
pub fn law_moves<M: ControlModel + ?Sized>(
    model: &M,
    x: &[u32],
    law: &[f64],
    out: &mut Vec<(Move, f64)>,
    scratch: &mut Vec<(Move, f64)>,
) {
    out.clear();
    model.base_moves(x, out);
    let layout = model.layout();
    for l in 0..layout.num_stations() {
        for (c, &p) in law[layout.range(l)].iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            scratch.clear();
            model.choice_moves(x, l, c, scratch);
            out.extend(scratch.iter().map(|&(m, q)| (m, p * q)));
        }
    }
}

/// `E f(next)` given the real moves out of `x`; the self-loop takes the rest.
pub fn expect_moves(x: &[u32], moves: &[(Move, f64)], buf: &mut State, mut f: impl FnMut(&[u32]) -> f64) -> f64 {
    let fx = f(x);
    let mut acc = fx;
    for &(m, p) in moves {
        buf.clear();
        buf.extend_from_slice(x);
        m.apply(buf);
        acc += p * (f(buf) - fx);
    }
    acc
}

/// Exact next-state distribution under a joint action. The self-loop entry
/// is always present, possibly with probability zero, and comes last.
pub fn transition_distribution<M: ControlModel + ?Sized>(
    model: &M,
    x: &[u32],
    action: &[u8],
) -> Result<Vec<(State, f64)>> {
    for (l, &c) in action.iter().enumerate() {
        if !model.is_feasible(x, l, c as usize) {
            return Err(Error::InfeasibleAction { station: l });
        }
    }
    let mut moves = Vec::new();
    action_moves(model, x, action, &mut moves);
    Ok(distribution_from_moves(x, &moves))
}

/// Next-state distribution of the chain induced by a randomized law.
pub fn law_distribution<M: ControlModel + ?Sized>(model: &M, x: &[u32], law: &[f64]) -> Vec<(State, f64)> {
    let mut moves = Vec::new();
    let mut scratch = Vec::new();
    law_moves(model, x, law, &mut moves, &mut scratch);
    distribution_from_moves(x, &moves)
}

fn distribution_from_moves(x: &[u32], moves: &[(Move, f64)]) -> Vec<(State, f64)> {
    let mut out: Vec<(State, f64)> = Vec::with_capacity(moves.len() + 1);
    for &(m, p) in moves {
        if m == Move::Stay || m.applied(x) == x {
            continue;
        }
        let y = m.applied(x);
        match out.iter_mut().find(|(s, _)| *s == y) {
            Some(e) => e.1 += p,
            None => out.push((y, p)),
        }
    }
    let moved: f64 = out.iter().map(|e| e.1).sum();
    out.push((x.to_vec(), (1.0 - moved).max(0.0)));
    out
}

/// Draws one uniform per station and picks a choice from each station's law.
pub fn sample_action(layout: &Layout, law: &[f64], rng: &mut Rng, out: &mut [u8]) {
    for (l, slot) in out.iter_mut().enumerate() {
        let u: f64 = rng.gen();
        let probs = &law[layout.range(l)];
        let mut acc = 0.0;
        let mut pick = None;
        for (c, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            pick = Some(c);
            if u < acc {
                break;
            }
        }
        *slot = pick.unwrap_or(0) as u8;
    }
}

/// Result of one simulated transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub cost: f64,
    pub fictitious: bool,
    pub arrival: bool,
}

/// Reusable single-step dynamics: sample an action, charge the cost of the
/// current state, draw the next state.
pub struct Stepper<'m, M: ControlModel + ?Sized> {
    model: &'m M,
    mode: StepMode,
    law: Vec<f64>,
    action: Vec<u8>,
    moves: Vec<(Move, f64)>,
    last_fictitious: bool,
    has_action: bool,
}

impl<'m, M: ControlModel + ?Sized> Stepper<'m, M> {
    pub fn new(model: &'m M, mode: StepMode) -> Self {
        Self {
            model,
            mode,
            law: vec![0.0; model.layout().total()],
            action: vec![0; model.num_stations()],
            moves: Vec::with_capacity(16),
            last_fictitious: false,
            has_action: false,
        }
    }

    /// Action taken at the most recent step.
    pub fn action(&self) -> &[u8] {
        &self.action
    }

    /// Forgets the held action (start of a new trajectory).
    pub fn reset(&mut self) {
        self.has_action = false;
        self.last_fictitious = false;
    }

    /// Advances `x` in place by one uniformized transition.
    ///
    /// Station uniforms are drawn on every step, including steps that keep the
    /// previous action, so both step modes consume the stream identically.
    pub fn step<P: LawSource + ?Sized>(&mut self, policy: &mut P, x: &mut [u32], rng: &mut Rng) -> StepOutcome {
        let reuse = self.mode == StepMode::RealTransitionsOnly && self.has_action && self.last_fictitious;
        if reuse {
            for _ in 0..self.action.len() {
                let _: f64 = rng.gen();
            }
        } else {
            policy.law_into(x, &mut self.law);
            sample_action(self.model.layout(), &self.law, rng, &mut self.action);
            self.has_action = true;
        }
        let cost = self.model.cost(x);
        action_moves(self.model, x, &self.action, &mut self.moves);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = Move::Stay;
        for &(m, p) in &self.moves {
            acc += p;
            if u < acc {
                chosen = m;
                break;
            }
        }
        chosen.apply(x);
        let fictitious = chosen == Move::Stay;
        self.last_fictitious = fictitious;
        StepOutcome { cost, fictitious, arrival: chosen.is_arrival() }
    }
}
