mod common;

use common::Toggle;
use qnppo::dp::{evaluate_discounted_exact, evaluate_policy_exact, Truncated, TruncationBox};
use qnppo::estimators::{
    advantage, avg_cost, default_horizon, discounted_targets, expected_next, h_amp, h_standard, r_star,
    regenerative_targets, v_amp, v_gae, v_infinite, EstimatorConfig,
};
use qnppo::fixtures::{self, Regime};
use qnppo::network::CompiledNetwork;
use qnppo::rng::actor_stream;
use qnppo::simulation::{run_cycles, run_steps, Episode, EpisodeBatch};
use qnppo::{ControlModel, Error, Policy, StepMode};

const EVERY: StepMode = StepMode::EveryTransition;

fn toy_episode(cycles: usize) -> Episode {
    let m = Toggle::new();
    let p = Policy::lbfs(1);
    run_cycles(&m, &mut p.runner(&m), cycles, EVERY, &mut actor_stream(0, 0, 0), 1000).unwrap()
}

fn batch(episodes: Vec<Episode>) -> EpisodeBatch {
    EpisodeBatch { episodes }
}

fn cfg(gamma: f64, lambda: f64) -> EstimatorConfig {
    EstimatorConfig { gamma, lambda, ..EstimatorConfig::default() }
}

fn zero(_: &[u32]) -> f64 {
    0.0
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn toy_average_cost() {
    assert_eq!(avg_cost(&batch(vec![toy_episode(2)])).unwrap(), 0.5);
    let mut ep = toy_episode(3);
    ep.costs.iter_mut().for_each(|c| *c = 2.5);
    assert_eq!(avg_cost(&batch(vec![ep])).unwrap(), 2.5);
}

#[test]
fn average_cost_needs_a_cycle() {
    let m = Toggle::new();
    let p = Policy::lbfs(1);
    let ep = run_steps(&m, &mut p.runner(&m), &[0], 1, EVERY, &mut actor_stream(0, 0, 0));
    assert!(matches!(avg_cost(&batch(vec![ep])), Err(Error::NoCompleteCycle)));
}

#[test]
fn toy_standard_estimates() {
    let ep = toy_episode(2);
    assert_eq!(h_standard(&ep, 1, 0.5).unwrap(), 0.5);
    assert_eq!(h_standard(&ep, 0, 0.5).unwrap(), 0.0);
    assert_eq!(h_standard(&ep, 2, 0.5).unwrap(), 0.0);
    assert!(matches!(h_standard(&ep, 4, 0.5), Err(Error::NoRegenerationAfter(4))));
    let mut flat = ep.clone();
    flat.costs.iter_mut().for_each(|c| *c = 0.7);
    for k in 0..4 {
        assert_eq!(h_standard(&flat, k, 0.7).unwrap(), 0.0);
    }
}

#[test]
fn toy_amp_estimate_by_hand() {
    // h(0) = 0, h(1) = 0.5 solves the toy Poisson equation with average 0.5.
    let ep = toy_episode(2);
    let h = |x: &[u32]| 0.5 * x[0] as f64;
    let ph = |x: &[u32]| 0.5 * (1 - x[0]) as f64;
    for k in 0..4 {
        assert_eq!(h_amp(&ep, k, 0.5, &h, &ph).unwrap(), h(ep.state(k)));
    }
    // An inexact ζ(1) = 2 at k = 1: 2 + (1 − 0.5 + 0 − 2) = 0.5.
    let z = |x: &[u32]| 2.0 * x[0] as f64;
    let pz = |x: &[u32]| 2.0 * (1 - x[0]) as f64;
    assert_eq!(h_amp(&ep, 1, 0.5, &z, &pz).unwrap(), 0.5);
}

#[test]
fn amp_with_zero_zeta_is_standard() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IM)).unwrap();
    let p = Policy::ProportionallyRandomized;
    let ep = run_cycles(&m, &mut p.runner(&m), 50, EVERY, &mut actor_stream(3, 0, 0), 1_000_000).unwrap();
    let avg = avg_cost(&batch(vec![ep.clone()])).unwrap();
    for k in (0..ep.len()).step_by(7) {
        assert_eq!(h_amp(&ep, k, avg, &zero, &zero).unwrap(), h_standard(&ep, k, avg).unwrap());
    }
}

#[test]
fn estimates_at_cycle_starts_average_to_zero() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IL)).unwrap();
    let p = Policy::ProportionallyRandomized;
    let ep = run_cycles(&m, &mut p.runner(&m), 2000, EVERY, &mut actor_stream(4, 0, 0), 10_000_000).unwrap();
    let avg = avg_cost(&batch(vec![ep.clone()])).unwrap();
    let starts: Vec<f64> = ep.cycles().iter().map(|&(s, _)| h_standard(&ep, s, avg).unwrap()).collect();
    let (mean, _) = mean_se(&starts);
    assert!(mean.abs() < 1e-9, "{mean}");
}

/// I.L. criss-cross under PR, restricted to a small box so exact values exist.
struct Boxed {
    net: CompiledNetwork,
    bx: TruncationBox,
}

impl Boxed {
    fn new(cap: u32) -> Self {
        Self {
            net: CompiledNetwork::new(fixtures::criss_cross(Regime::IL)).unwrap(),
            bx: TruncationBox::uniform(3, cap).unwrap(),
        }
    }

    fn model(&self) -> Truncated<'_, CompiledNetwork> {
        Truncated::new(&self.net, &self.bx)
    }

    fn lookup<'a>(&'a self, v: &'a [f64]) -> impl Fn(&[u32]) -> f64 + 'a {
        move |x| v[self.bx.index(x).unwrap()]
    }
}

fn pr_expectation<'a, M: ControlModel>(m: &'a M, f: &'a dyn Fn(&[u32]) -> f64) -> impl Fn(&[u32]) -> f64 + 'a {
    move |x| {
        let law = Policy::ProportionallyRandomized.action_law(m, x);
        expected_next(m, x, &law.probs, f)
    }
}

#[test]
fn exact_poisson_solution_gives_zero_variance() {
    let b = Boxed::new(10);
    let m = b.model();
    let p = Policy::ProportionallyRandomized;
    let exact = evaluate_policy_exact(&b.net, &p, &b.bx).unwrap();
    let h = b.lookup(&exact.values);
    let ph = pr_expectation(&m, &h);
    let ep = run_cycles(&m, &mut p.runner(&m), 200, EVERY, &mut actor_stream(6, 0, 0), 10_000_000).unwrap();
    for k in 0..ep.len() {
        let x = ep.state(k);
        let residual = ep.costs[k] - exact.average_cost + ph(x) - h(x);
        assert!(residual.abs() < 1e-9, "{x:?}: {residual}");
    }
    for k in (0..ep.len()).step_by(5) {
        let est = h_amp(&ep, k, exact.average_cost, &h, &ph).unwrap();
        assert!((est - h(ep.state(k))).abs() < 1e-9);
    }
}

#[test]
fn exact_discounted_values_give_zero_variance() {
    let b = Boxed::new(10);
    let m = b.model();
    let p = Policy::ProportionallyRandomized;
    let gamma = 0.99;
    let exact = evaluate_discounted_exact(&b.net, &p, &b.bx, gamma).unwrap();
    let v = b.lookup(&exact.v);
    let pv = pr_expectation(&m, &v);
    let ep = run_steps(&m, &mut p.runner(&m), &[0, 0, 0], 3000, EVERY, &mut actor_stream(7, 0, 0));
    let c = cfg(gamma, 0.9);
    for k in 0..ep.len() {
        let x = ep.state(k);
        let residual = ep.costs[k] - exact.r_star + gamma * pv(x) - v(x);
        assert!(residual.abs() < 1e-9, "{x:?}: {residual}");
    }
    for k in (0..2000).step_by(11) {
        let est = v_amp(&ep, k, &c, exact.r_star, &[0, 0, 0], &v, &pv);
        assert!((est - v(ep.state(k))).abs() < 1e-8);
    }
}

#[test]
fn discounted_solutions_differ_by_a_constant() {
    let b = Boxed::new(12);
    let exact = evaluate_discounted_exact(&b.net, &Policy::ProportionallyRandomized, &b.bx, 0.998).unwrap();
    let anchor = b.bx.index(&[0, 0, 0]).unwrap();
    let shift = exact.v[anchor] - exact.j[anchor];
    let worst = exact.v.iter().zip(&exact.j).map(|(v, j)| (v - j - shift).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn r_star_of_a_constant_cost_is_a_geometric_sum() {
    let mut ep = toy_episode(1);
    let n = 100;
    ep.states = std::iter::once(0).chain(std::iter::repeat(1).take(n)).collect();
    ep.costs = vec![3.0; n];
    ep.regenerations.clear();
    let gamma: f64 = 0.9;
    let r = r_star(&batch(vec![ep.clone()]), &[0], gamma, 10).unwrap();
    assert!((r - 3.0 * (1.0 - gamma.powi(11))).abs() < 1e-12);
    let r = r_star(&batch(vec![ep]), &[0], gamma, default_horizon(gamma)).unwrap();
    assert!((r - 3.0).abs() < 3.0 * 1e-4);
}

#[test]
fn r_star_needs_a_visit() {
    let m = Toggle::new();
    let p = Policy::lbfs(1);
    let ep = run_steps(&m, &mut p.runner(&m), &[1], 0, EVERY, &mut actor_stream(0, 0, 0));
    assert!(matches!(r_star(&batch(vec![ep]), &[0], 0.9, 10), Err(Error::RegenerationNeverVisited)));
}

#[test]
fn r_star_approaches_the_average_cost() {
    let m = Toggle::new();
    let p = Policy::lbfs(1);
    let n = 2_000_000;
    let ep = run_steps(&m, &mut p.runner(&m), &[0], n, EVERY, &mut actor_stream(0, 0, 0));
    let b = batch(vec![ep]);
    let mut gaps = Vec::new();
    for gamma in [0.9, 0.99, 0.999] {
        let r = r_star(&b, &[0], gamma, default_horizon(gamma)).unwrap();
        // From x* the chain pays 0, 1, 0, 1, ...; enumerate the truncated sums.
        let horizon = default_horizon(gamma);
        let visits: Vec<usize> = (0..n).step_by(2).collect();
        let sum: f64 = visits
            .iter()
            .map(|&k| {
                let odd = (horizon.min(n - 1 - k) + 1) / 2;
                gamma * (1.0 - gamma.powi(2 * odd as i32)) / (1.0 - gamma * gamma)
            })
            .sum();
        let exact = (1.0 - gamma) * sum / visits.len() as f64;
        assert!((r - exact).abs() < 1e-9, "γ={gamma}: {r} vs {exact}");
        assert!((exact - gamma / (1.0 + gamma)).abs() < 0.01);
        gaps.push((r - 0.5).abs());
    }
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

#[test]
fn default_horizon_reaches_the_tolerance() {
    for gamma in [0.5f64, 0.9, 0.998] {
        let l = default_horizon(gamma);
        assert!(gamma.powi(l as i32) < 1e-4);
        assert!(gamma.powi(l as i32 - 1) >= 1e-4);
    }
}

#[test]
fn r_star_matches_the_exact_discounted_value() {
    let b = Boxed::new(25);
    let p = Policy::ProportionallyRandomized;
    let gamma = 0.998;
    let exact = evaluate_discounted_exact(&b.net, &p, &b.bx, gamma).unwrap();
    let horizon = default_horizon(gamma);
    let per_actor: Vec<f64> = (0..20)
        .map(|q| {
            let ep = run_steps(&b.net, &mut p.runner(&b.net), &[0, 0, 0], 60_000, EVERY, &mut actor_stream(11, q, 0));
            r_star(&batch(vec![ep]), &[0, 0, 0], gamma, horizon).unwrap()
        })
        .collect();
    let (mean, se) = mean_se(&per_actor);
    assert!((mean - exact.r_star).abs() < 3.0 * se, "{mean} ± {se} vs {}", exact.r_star);
}

#[test]
fn undiscounted_amp_reduces_to_regenerative_estimates() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IM)).unwrap();
    let p = Policy::ProportionallyRandomized;
    let ep = run_cycles(&m, &mut p.runner(&m), 40, EVERY, &mut actor_stream(8, 0, 0), 1_000_000).unwrap();
    let avg = avg_cost(&batch(vec![ep.clone()])).unwrap();
    let c = cfg(1.0, 1.0);
    let x_star = [0, 0, 0];
    let z = |x: &[u32]| 0.3 * x[0] as f64 + 0.1 * (x[1] * x[2]) as f64 - 0.2 * x[2] as f64;
    let pz = pr_expectation(&m, &z);
    let end = *ep.regenerations.last().unwrap();
    for k in 0..end {
        assert_eq!(v_amp(&ep, k, &c, avg, &x_star, &zero, &zero), h_standard(&ep, k, avg).unwrap());
        let a = v_amp(&ep, k, &c, avg, &x_star, &z, &pz);
        let b = h_amp(&ep, k, avg, &z, &pz).unwrap();
        assert!((a - b).abs() < 1e-9, "k={k}: {a} vs {b}");
    }
}

#[test]
fn gae_with_unit_lambda_ignores_zeta_on_full_cycles() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IM)).unwrap();
    let p = Policy::ProportionallyRandomized;
    let ep = run_cycles(&m, &mut p.runner(&m), 40, EVERY, &mut actor_stream(9, 0, 0), 1_000_000).unwrap();
    let c = cfg(0.99, 1.0);
    let x_star = [0, 0, 0];
    let z1 = |x: &[u32]| (x[0] + 2 * x[1]) as f64;
    let z2 = |x: &[u32]| (x[2] * x[2]) as f64 - 0.5 * x[0] as f64;
    let end = *ep.regenerations.last().unwrap();
    for k in 0..end {
        let base = v_gae(&ep, k, &c, 0.4, &x_star, &zero);
        for z in [&z1 as &dyn Fn(&[u32]) -> f64, &z2] {
            assert!((v_gae(&ep, k, &c, 0.4, &x_star, z) - base).abs() < 1e-9);
        }
    }
}

#[test]
fn gae_equals_amp_on_a_deterministic_chain() {
    let m = Toggle::new();
    let ep = toy_episode(5);
    let law = Policy::lbfs(1);
    let z = |x: &[u32]| 1.7 * x[0] as f64;
    let pz = |x: &[u32]| expected_next(&m, x, &law.action_law(&m, x).probs, z);
    let c = cfg(0.95, 0.8);
    for k in 0..ep.len() {
        assert_eq!(v_gae(&ep, k, &c, 0.3, &[0], &z), v_amp(&ep, k, &c, 0.3, &[0], &z, &pz));
    }
}

#[test]
fn infinite_and_regenerative_forms_coincide_without_returns() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::BH)).unwrap();
    let p = Policy::ProportionallyRandomized;
    let ep = run_steps(&m, &mut p.runner(&m), &[5, 5, 5], 300, EVERY, &mut actor_stream(1, 0, 0));
    assert!(ep.regenerations.is_empty());
    let z = |x: &[u32]| (x[0] + x[1] + x[2]) as f64;
    let pz = pr_expectation(&m, &z);
    let c = cfg(0.99, 0.95);
    for k in (0..300).step_by(13) {
        assert_eq!(v_infinite(&ep, k, &c, 2.0, &[0, 0, 0], &z, &pz), v_amp(&ep, k, &c, 2.0, &[0, 0, 0], &z, &pz));
    }
    let mut flat = ep.clone();
    flat.costs.iter_mut().for_each(|g| *g = 4.0);
    for k in [0, 10, 299] {
        assert_eq!(v_infinite(&flat, k, &c, 4.0, &[0, 0, 0], &zero, &zero), 0.0);
    }
}

/// M/M/1 with λ=0.5, μ=1 kept to states 0..=4.
fn five_state() -> (CompiledNetwork, TruncationBox) {
    (CompiledNetwork::new(fixtures::mm1(0.5, 1.0)).unwrap(), TruncationBox::uniform(1, 4).unwrap())
}

#[test]
fn martingale_correction_is_unbiased() {
    let (net, bx) = five_state();
    let m = Truncated::new(&net, &bx);
    let p = Policy::lbfs(1);
    let z = |x: &[u32]| 1.3 * x[0] as f64 + 0.4 * (x[0] * x[0]) as f64;
    let pz = |x: &[u32]| expected_next(&m, x, &p.action_law(&m, x).probs, z);
    let c = cfg(0.95, 1.0);
    let (mut amp, mut std) = (Vec::new(), Vec::new());
    for q in 0..10_000 {
        let ep = run_steps(&m, &mut p.runner(&m), &[3], 400, EVERY, &mut actor_stream(21, q, 0));
        amp.push(v_amp(&ep, 0, &c, 0.5, &[0], &z, &pz));
        std.push(v_amp(&ep, 0, &c, 0.5, &[0], &zero, &zero));
    }
    let (ma, sa) = mean_se(&amp);
    let (ms, ss) = mean_se(&std);
    let joint = (sa * sa + ss * ss).sqrt();
    assert!((ma - ms).abs() < 3.0 * joint, "{ma} vs {ms} (se {joint})");
    assert!(sa < ss, "control variate should reduce variance: {sa} vs {ss}");
}

#[test]
fn gae_and_amp_share_their_expectation() {
    let (net, bx) = five_state();
    let m = Truncated::new(&net, &bx);
    let p = Policy::lbfs(1);
    let z = |x: &[u32]| 2.0 * x[0] as f64 - 0.1 * (x[0] * x[0]) as f64;
    let pz = |x: &[u32]| expected_next(&m, x, &p.action_law(&m, x).probs, z);
    let c = cfg(0.95, 0.7);
    let mut diff = Vec::new();
    for q in 0..10_000 {
        let ep = run_steps(&m, &mut p.runner(&m), &[2], 400, EVERY, &mut actor_stream(22, q, 0));
        diff.push(v_gae(&ep, 0, &c, 0.5, &[0], &z) - v_amp(&ep, 0, &c, 0.5, &[0], &z, &pz));
    }
    let (mean, se) = mean_se(&diff);
    assert!(mean.abs() < 3.0 * se, "{mean} (se {se})");
}

#[test]
fn batch_targets_match_per_step_estimators() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IM)).unwrap();
    let p = Policy::ProportionallyRandomized;
    let ep = run_cycles(&m, &mut p.runner(&m), 30, EVERY, &mut actor_stream(2, 0, 0), 1_000_000).unwrap();
    let x_star = [0, 0, 0];
    let z = |x: &[u32]| 0.5 * x[0] as f64 + x[1] as f64 + 0.25 * (x[2] * x[2]) as f64;
    let pz = pr_expectation(&m, &z);
    let zeta: Vec<f64> = (0..=ep.len()).map(|t| z(ep.state(t))).collect();
    let pzeta: Vec<f64> = (0..ep.len()).map(|t| pz(ep.state(t))).collect();
    let avg = avg_cost(&batch(vec![ep.clone()])).unwrap();
    let regen = regenerative_targets(&ep, avg, &zeta, &pzeta, &x_star);
    for (k, t) in regen.iter().enumerate() {
        assert!((t - h_amp(&ep, k, avg, &z, &pz).unwrap()).abs() < 1e-9);
    }
    let c = cfg(0.99, 0.9);
    let n = ep.len() / 2;
    let next_sample: Vec<f64> = zeta[1..].to_vec();
    let amp = discounted_targets(&ep, n, &c, avg, &zeta, &pzeta, true, &x_star);
    let gae = discounted_targets(&ep, n, &c, avg, &zeta, &next_sample, true, &x_star);
    let inf = discounted_targets(&ep, n, &c, avg, &zeta, &pzeta, false, &x_star);
    assert_eq!(amp.len(), n);
    for k in 0..n {
        assert!((amp[k] - v_amp(&ep, k, &c, avg, &x_star, &z, &pz)).abs() < 1e-9);
        assert!((gae[k] - v_gae(&ep, k, &c, avg, &x_star, &z)).abs() < 1e-9);
        assert!((inf[k] - v_infinite(&ep, k, &c, avg, &x_star, &z, &pz)).abs() < 1e-9);
    }
}

#[test]
fn advantage_by_hand_and_errors() {
    let m = Toggle::new();
    let f = |x: &[u32]| 3.0 * x[0] as f64;
    assert_eq!(advantage(&m, &f, &[1], &[1], 0.5, 1.0).unwrap(), 1.0 - 0.5 + 0.0 - 3.0);
    assert_eq!(advantage(&m, &f, &[1], &[0], 0.5, 0.9).unwrap(), 1.0 - 0.5 + 0.9 * 3.0 - 3.0);
    assert!(matches!(advantage(&m, &f, &[0], &[1], 0.0, 1.0), Err(Error::InfeasibleAction { station: 0 })));
    let net = CompiledNetwork::new(fixtures::criss_cross(Regime::IL)).unwrap();
    assert_eq!(advantage(&net, &zero, &[1, 2, 3], &[2, 1], 0.25, 1.0).unwrap(), 6.0 - 0.25);
}

#[test]
fn exact_advantages_average_to_zero_under_the_policy() {
    let b = Boxed::new(8);
    let m = b.model();
    let p = Policy::ProportionallyRandomized;
    let exact = evaluate_policy_exact(&b.net, &p, &b.bx).unwrap();
    let h = b.lookup(&exact.values);
    let layout = m.layout().clone();
    let mut x = vec![0; 3];
    for i in 0..b.bx.len() {
        b.bx.decode(i, &mut x);
        let law = p.action_law(&m, &x);
        let mut total = 0.0;
        for c0 in 0..layout.choices(0).len() {
            for c1 in 0..layout.choices(1).len() {
                let w = law.station(&layout, 0)[c0] * law.station(&layout, 1)[c1];
                if w > 0.0 {
                    total += w * advantage(&m, &h, &x, &[c0 as u8, c1 as u8], exact.average_cost, 1.0).unwrap();
                }
            }
        }
        assert!(total.abs() < 1e-9, "{x:?}: {total}");
    }
}
