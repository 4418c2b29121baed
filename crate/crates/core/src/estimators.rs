//! Value and advantage estimators built on regenerative structure.
//!
//! Each estimator comes in two forms: a per-step function that sums the
//! defining series directly, and a batch form that fills targets for a whole
//! episode with a backward recursion. The trainer uses the batch forms; the
//! per-step forms double as references for them.
//!
//! Control-variate inputs are passed as arrays aligned with the episode:
//! `zeta[t] = ζ(x_t)` for `t ≤ len` and `pzeta[t] = Σ_y P(y|x_t)ζ(y)` under
//! the behaviour policy for `t < len`.

use crate::error::{Error, Result};
use crate::mdp::{self, ControlModel, Move, State};
use crate::simulation::{Episode, EpisodeBatch};
use serde::{Deserialize, Serialize};

/// Which value-target family to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Standard,
    Amp,
    Gae,
}

/// Truncate discounted sums at the next regeneration, or run to the episode end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueTarget {
    RegenerativeDiscounted,
    InfiniteDiscounted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Steps appended after the first `N` to close the discounted tails.
    pub tail: usize,
    pub variant: Variant,
    pub target: ValueTarget,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            gamma: 0.998,
            lambda: 0.99,
            tail: 1000,
            variant: Variant::Amp,
            target: ValueTarget::RegenerativeDiscounted,
        }
    }
}

/// Smallest `L` with `γ^L < 1e-4`.
pub fn default_horizon(gamma: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    if gamma >= 1.0 {
        return usize::MAX;
    }
    ((1e-4f64).ln() / gamma.ln()).floor() as usize + 1
}

/// Pooled cost per step over the complete cycles of cycle-mode episodes.
pub fn avg_cost(batch: &EpisodeBatch) -> Result<f64> {
    let mut cost = 0.0;
    let mut steps = 0usize;
    for ep in &batch.episodes {
        if let Some(&end) = ep.regenerations.last() {
            cost += ep.costs[..end].iter().sum::<f64>();
            steps += end;
        }
    }
    if steps == 0 {
        return Err(Error::NoCompleteCycle);
    }
    Ok(cost / steps as f64)
}

/// Plain time average over all steps of all episodes.
pub fn avg_cost_steps(batch: &EpisodeBatch) -> Result<f64> {
    let steps = batch.total_steps();
    if steps == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    Ok(batch.episodes.iter().map(|e| e.costs.iter().sum::<f64>()).sum::<f64>() / steps as f64)
}

fn next_regeneration(ep: &Episode, k: usize) -> Option<usize> {
    let i = ep.regenerations.partition_point(|&s| s <= k);
    ep.regenerations.get(i).copied()
}

/// `Σ_{t=k}^{σ_k−1} (g(x_t) − avg)`.
pub fn h_standard(ep: &Episode, k: usize, avg: f64) -> Result<f64> {
    let end = next_regeneration(ep, k).ok_or(Error::NoRegenerationAfter(k))?;
    Ok((k..end).map(|t| ep.costs[t] - avg).sum())
}

/// `ζ(x_k) + Σ_{t=k}^{σ_k−1} (g(x_t) − avg + Pζ(x_t) − ζ(x_t))`.
pub fn h_amp(
    ep: &Episode,
    k: usize,
    avg: f64,
    zeta: &dyn Fn(&[u32]) -> f64,
    pzeta: &dyn Fn(&[u32]) -> f64,
) -> Result<f64> {
    let end = next_regeneration(ep, k).ok_or(Error::NoRegenerationAfter(k))?;
    let mut s = zeta(ep.state(k));
    for t in k..end {
        let x = ep.state(t);
        s += ep.costs[t] - avg + pzeta(x) - zeta(x);
    }
    Ok(s)
}

/// Estimate of `(1−γ)·E Σ γ^k g(x_k)` from x*, averaged over every visit to
/// x* (the initial state included) with sums truncated at `horizon` steps or
/// the episode end.
pub fn r_star(batch: &EpisodeBatch, x_star: &[u32], gamma: f64, horizon: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut visits = 0usize;
    let tail = gamma.powi(horizon.min(i32::MAX as usize - 1) as i32 + 1);
    for ep in &batch.episodes {
        let n = ep.len();
        let mut suffix = vec![0.0; n + 1];
        for t in (0..n).rev() {
            suffix[t] = ep.costs[t] + gamma * suffix[t + 1];
        }
        for k in 0..n {
            if ep.state(k) == x_star {
                let stop = k.saturating_add(horizon).saturating_add(1);
                let cut = if stop <= n { tail * suffix[stop] } else { 0.0 };
                total += suffix[k] - cut;
                visits += 1;
            }
        }
    }
    if visits == 0 {
        return Err(Error::RegenerationNeverVisited);
    }
    Ok((1.0 - gamma) * total / visits as f64)
}

fn discounted_sum(
    ep: &Episode,
    k: usize,
    cfg: &EstimatorConfig,
    center: f64,
    truncate: bool,
    x_star: &[u32],
    mut residual: impl FnMut(usize) -> f64,
) -> f64 {
    let mut s = 0.0;
    let mut w = 1.0;
    let decay = cfg.gamma * cfg.lambda;
    for t in k..ep.len() {
        s += w * (ep.costs[t] - center + residual(t));
        if truncate && ep.state(t + 1) == x_star {
            break;
        }
        w *= decay;
    }
    s
}

/// Regenerative discounted AMP estimate with TD(λ) weights:
/// `ζ(x_k) + Σ_{t=k}^{min(σ_k, end)−1} (γλ)^{t−k} (g − r̂ + γPζ − ζ)(x_t)`.
pub fn v_amp(
    ep: &Episode,
    k: usize,
    cfg: &EstimatorConfig,
    r_hat: f64,
    x_star: &[u32],
    zeta: &dyn Fn(&[u32]) -> f64,
    pzeta: &dyn Fn(&[u32]) -> f64,
) -> f64 {
    let g = cfg.gamma;
    zeta(ep.state(k))
        + discounted_sum(ep, k, cfg, r_hat, true, x_star, |t| {
            let x = ep.state(t);
            g * pzeta(x) - zeta(x)
        })
}

/// GAE form: the kernel expectation replaced by the sampled next state.
pub fn v_gae(
    ep: &Episode,
    k: usize,
    cfg: &EstimatorConfig,
    r_hat: f64,
    x_star: &[u32],
    zeta: &dyn Fn(&[u32]) -> f64,
) -> f64 {
    let g = cfg.gamma;
    zeta(ep.state(k))
        + discounted_sum(ep, k, cfg, r_hat, true, x_star, |t| g * zeta(ep.state(t + 1)) - zeta(ep.state(t)))
}

/// Untruncated discounted AMP estimate centred at the average cost.
pub fn v_infinite(
    ep: &Episode,
    k: usize,
    cfg: &EstimatorConfig,
    avg: f64,
    x_star: &[u32],
    zeta: &dyn Fn(&[u32]) -> f64,
    pzeta: &dyn Fn(&[u32]) -> f64,
) -> f64 {
    let g = cfg.gamma;
    zeta(ep.state(k))
        + discounted_sum(ep, k, cfg, avg, false, x_star, |t| {
            let x = ep.state(t);
            g * pzeta(x) - zeta(x)
        })
}

/// Targets for every step before the last regeneration of a cycle-mode
/// episode: `ĥ_k = ζ(x_k) + Σ_{t=k}^{σ_k−1} (g − avg + Pζ − ζ)`. With `zeta`
/// and `pzeta` zero this is the standard regenerative estimate.
pub fn regenerative_targets(ep: &Episode, avg: f64, zeta: &[f64], pzeta: &[f64], x_star: &[u32]) -> Vec<f64> {
    let end = ep.regenerations.last().copied().unwrap_or(0);
    let mut out = vec![0.0; end];
    let mut acc = 0.0;
    for t in (0..end).rev() {
        if ep.state(t + 1) == x_star {
            acc = 0.0;
        }
        acc += ep.costs[t] - avg + pzeta[t] - zeta[t];
        out[t] = zeta[t] + acc;
    }
    out
}

/// Discounted targets for steps `0..n`: `ζ(x_k) + Σ (γλ)^{t−k} d_t`, where
/// `d_t = g − center + γ·next_t − ζ(x_t)` and `next_t` is either `Pζ(x_t)`
/// (AMP) or `ζ(x_{t+1})` (GAE). Sums stop at the next visit to x* when
/// `truncate` is set and always at the episode end.
pub fn discounted_targets(
    ep: &Episode,
    n: usize,
    cfg: &EstimatorConfig,
    center: f64,
    zeta: &[f64],
    next: &[f64],
    truncate: bool,
    x_star: &[u32],
) -> Vec<f64> {
    let len = ep.len();
    let decay = cfg.gamma * cfg.lambda;
    let mut acc = 0.0;
    let mut out = vec![0.0; n.min(len)];
    for t in (0..len).rev() {
        if truncate && ep.state(t + 1) == x_star {
            acc = 0.0;
        }
        acc = ep.costs[t] - center + cfg.gamma * next[t] - zeta[t] + decay * acc;
        if t < out.len() {
            out[t] = zeta[t] + acc;
        }
    }
    out
}

/// `Σ_y P(y|x) f(y)` for the chain induced by `law` at `x`.
pub fn expected_next<M: ControlModel + ?Sized>(model: &M, x: &[u32], law: &[f64], f: impl FnMut(&[u32]) -> f64) -> f64 {
    let mut moves = Vec::new();
    let mut scratch = Vec::new();
    mdp::law_moves(model, x, law, &mut moves, &mut scratch);
    mdp::expect_moves(x, &moves, &mut Vec::new(), f)
}

/// Successor states (self included) of `x` over all choices any policy may take.
pub fn successors<M: ControlModel + ?Sized>(model: &M, x: &[u32], out: &mut Vec<State>) {
    let mut moves: Vec<(Move, f64)> = Vec::new();
    model.base_moves(x, &mut moves);
    let layout = model.layout();
    for l in 0..layout.num_stations() {
        for c in 0..layout.choices(l).len() {
            model.choice_moves(x, l, c, &mut moves);
        }
    }
    out.clear();
    out.push(x.to_vec());
    for (m, _) in moves {
        let y = m.applied(x);
        if !out.contains(&y) {
            out.push(y);
        }
    }
}

/// `g(x) − center + γ Σ_y P(y|x,a) V(y) − V(x)`, the expectation taken exactly.
pub fn advantage<M: ControlModel + ?Sized>(
    model: &M,
    value: &dyn Fn(&[u32]) -> f64,
    x: &[u32],
    action: &[u8],
    center: f64,
    gamma: f64,
) -> Result<f64> {
    for (l, &c) in action.iter().enumerate() {
        if !model.is_feasible(x, l, c as usize) {
            return Err(Error::InfeasibleAction { station: l });
        }
    }
    let mut moves = Vec::new();
    mdp::action_moves(model, x, action, &mut moves);
    let pv = mdp::expect_moves(x, &moves, &mut Vec::new(), value);
    Ok(model.cost(x) - center + gamma * pv - value(x))
}
