mod common;

use common::Toggle;
use qnppo::dp::{
    best_threshold, evaluate_discounted_exact, evaluate_greedy, evaluate_policy_exact, relative_value_iteration,
    PolicyChain, RviOptions, TruncationBox,
};
use qnppo::fixtures::{self, Regime};
use qnppo::network::{CompiledNModel, CompiledNetwork};
use qnppo::nn::{Architecture, Mlp};
use qnppo::rng::{stream, Purpose};
use qnppo::{ControlModel, Error, Layout, Move, Policy};

fn quick() -> RviOptions {
    RviOptions { sensitivity: false, ..RviOptions::default() }
}

#[test]
fn box_indexing_roundtrips() {
    let bx = TruncationBox::new(vec![2, 3, 1]).unwrap();
    assert_eq!(bx.len(), 24);
    for i in 0..bx.len() {
        assert_eq!(bx.index(&bx.state(i)), Some(i));
    }
    assert_eq!(bx.index(&[3, 0, 0]), None);
    assert!(TruncationBox::new(vec![0, 4]).is_err());
    assert!(TruncationBox::uniform(6, 1000).is_err());
}

#[test]
fn mm1_optimum_is_rho_over_one_minus_rho() {
    let m = CompiledNetwork::new(fixtures::mm1(0.5, 1.0)).unwrap();
    let bx = TruncationBox::uniform(1, 60).unwrap();
    let sol = relative_value_iteration(&m, &bx, &RviOptions::default()).unwrap();
    assert!((sol.average_cost - 1.0).abs() < 0.01, "{}", sol.average_cost);
    assert!(sol.sensitivity.unwrap() < 1e-6);
    assert_eq!(sol.values[0], 0.0);
    // Serving is optimal wherever the queue is nonempty.
    for n in 1..=60u32 {
        assert_eq!(sol.action(&[n]).unwrap(), &[1]);
    }
}

/// Poisson equation of the uniformized M/M/1 on {0..=cap}, solved forward.
fn birth_death_oracle(lambda: f64, mu: f64, cap: usize) -> (f64, Vec<f64>) {
    let b = lambda + mu;
    let (p, q) = (lambda / b, mu / b);
    let rho = lambda / mu;
    let weights: Vec<f64> = (0..=cap).map(|n| rho.powi(n as i32)).collect();
    let z: f64 = weights.iter().sum();
    let eta = weights.iter().enumerate().map(|(n, w)| n as f64 * w).sum::<f64>() / z;
    let mut h = vec![0.0; cap + 1];
    h[1] = eta / p;
    for n in 1..cap {
        h[n + 1] = h[n] + (eta - n as f64 + q * (h[n] - h[n - 1])) / p;
    }
    (eta, h)
}

#[test]
fn serve_always_matches_hand_solved_birth_death() {
    for cap in 1..=5 {
        let m = CompiledNetwork::new(fixtures::mm1(0.5, 1.0)).unwrap();
        let bx = TruncationBox::uniform(1, cap).unwrap();
        let ev = evaluate_policy_exact(&m, &Policy::lbfs(1), &bx).unwrap();
        let (eta, h) = birth_death_oracle(0.5, 1.0, cap as usize);
        assert!((ev.average_cost - eta).abs() < 1e-12);
        for (a, b) in ev.values.iter().zip(&h) {
            assert!((a - b).abs() < 1e-9, "cap {cap}: {:?} vs {h:?}", ev.values);
        }
        assert!(ev.residual < 1e-9);
    }
}

/// A model with the M/M/1 dynamics and a constant cost.
struct Flat {
    inner: CompiledNetwork,
    c: f64,
}

impl ControlModel for Flat {
    fn num_classes(&self) -> usize {
        1
    }
    fn layout(&self) -> &Layout {
        self.inner.layout()
    }
    fn cost(&self, _: &[u32]) -> f64 {
        self.c
    }
    fn regeneration_state(&self) -> &[u32] {
        self.inner.regeneration_state()
    }
    fn base_moves(&self, x: &[u32], out: &mut Vec<(Move, f64)>) {
        self.inner.base_moves(x, out)
    }
    fn choice_moves(&self, x: &[u32], station: usize, choice: usize, out: &mut Vec<(Move, f64)>) {
        self.inner.choice_moves(x, station, choice, out)
    }
}

#[test]
fn constant_cost_has_flat_values() {
    let m = Flat { inner: CompiledNetwork::new(fixtures::mm1(0.5, 1.0)).unwrap(), c: 2.5 };
    let bx = TruncationBox::uniform(1, 10).unwrap();
    let ev = evaluate_policy_exact(&m, &Policy::lbfs(1), &bx).unwrap();
    assert!((ev.average_cost - 2.5).abs() < 1e-12);
    assert!(ev.values.iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn toy_discounted_values_by_hand() {
    let m = Toggle::new();
    let bx = TruncationBox::uniform(1, 1).unwrap();
    let d = evaluate_discounted_exact(&m, &Policy::lbfs(1), &bx, 0.5).unwrap();
    // W0 = 0.5·W1, W1 = 1 + 0.5·W0.
    let (w0, w1) = (2.0 / 3.0, 4.0 / 3.0);
    assert!((d.r_star - 0.5 * w0).abs() < 1e-12);
    assert!(d.v[0].abs() < 1e-12 && (d.v[1] - (w1 - w0)).abs() < 1e-12);
    assert!((d.j[0] - (w0 - 1.0)).abs() < 1e-12 && (d.j[1] - (w1 - 1.0)).abs() < 1e-12);
    assert!((d.average_cost - 0.5).abs() < 1e-12);
}

#[test]
fn zero_discount_values_are_one_step_costs() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IL)).unwrap();
    let bx = TruncationBox::uniform(3, 5).unwrap();
    let d = evaluate_discounted_exact(&m, &Policy::ProportionallyRandomized, &bx, 0.0).unwrap();
    assert_eq!(d.r_star, 0.0);
    for i in 0..bx.len() {
        let x = bx.state(i);
        assert!((d.v[i] - m.cost(&x)).abs() < 1e-12);
    }
}

#[test]
fn discounted_residuals_are_small() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IM)).unwrap();
    let bx = TruncationBox::uniform(3, 12).unwrap();
    let d = evaluate_discounted_exact(&m, &Policy::ProportionallyRandomized, &bx, 0.998).unwrap();
    assert!(d.residual_v < 1e-9 && d.residual_j < 1e-9, "{} {}", d.residual_v, d.residual_j);
    let anchor = bx.index(&[0, 0, 0]).unwrap();
    let shift = d.v[anchor] - d.j[anchor];
    let worst = d.v.iter().zip(&d.j).map(|(v, j)| (v - j - shift).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn optimum_dominates_every_policy_on_the_box() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IM)).unwrap();
    let bx = TruncationBox::uniform(3, 14).unwrap();
    let sol = relative_value_iteration(&m, &bx, &quick()).unwrap();
    let net = Mlp::xavier(&Architecture::policy(3, 2, 5), &mut stream(1, Purpose::Init, 0, 0));
    for p in [
        Policy::ProportionallyRandomized,
        Policy::lbfs(3),
        Policy::StaticPriority(vec![0, 1, 2]),
        Policy::UniformRandom,
        Policy::Neural(net),
    ] {
        let ev = evaluate_policy_exact(&m, &p, &bx).unwrap();
        assert!(sol.average_cost <= ev.average_cost + 1e-6, "{}: {} < {}", p.name(), ev.average_cost, sol.average_cost);
    }
}

#[test]
fn greedy_policy_reproduces_the_optimum() {
    let m = CompiledNetwork::new(fixtures::criss_cross(Regime::IL)).unwrap();
    let bx = TruncationBox::uniform(3, 15).unwrap();
    let sol = relative_value_iteration(&m, &bx, &RviOptions { tol: 1e-11, ..quick() }).unwrap();
    let ev = evaluate_greedy(&m, &sol).unwrap();
    assert!((ev.average_cost - sol.average_cost).abs() < 1e-8, "{} vs {}", ev.average_cost, sol.average_cost);
    assert!((sol.average_cost - 0.671).abs() < 0.003, "{}", sol.average_cost);
}

#[test]
fn idling_forever_is_reducible() {
    let m = CompiledNetwork::new(fixtures::mm1(0.5, 1.0)).unwrap();
    let bx = TruncationBox::uniform(1, 5).unwrap();
    let r = PolicyChain::for_policy(&m, &bx, &Policy::StaticPriority(vec![]));
    assert!(matches!(r, Err(Error::Reducible(_))));
}

#[test]
fn light_n_model_prefers_small_thresholds() {
    let m = CompiledNModel::new(fixtures::n_model(0.1)).unwrap();
    let bx = TruncationBox::uniform(2, 30).unwrap();
    let (best, costs) = best_threshold(&m, &bx, 0..=12).unwrap();
    assert!(best <= 3, "T* = {best}: {costs:?}");
    for w in costs[best as usize..].windows(2) {
        assert!(w[1].1 >= w[0].1 - 1e-12, "{costs:?}");
    }
    let sol = relative_value_iteration(&m, &bx, &quick()).unwrap();
    for t in [0, 1000] {
        let c = evaluate_policy_exact(&m, &Policy::Threshold(t), &bx).unwrap().average_cost;
        assert!(c.is_finite() && c >= sol.average_cost - 1e-6);
    }
}

#[test]
fn solution_csv_lists_every_state() {
    let m = CompiledNetwork::new(fixtures::mm1(0.5, 1.0)).unwrap();
    let bx = TruncationBox::uniform(1, 4).unwrap();
    let sol = relative_value_iteration(&m, &bx, &quick()).unwrap();
    let mut buf = Vec::new();
    sol.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x0,value,a0");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,0,"));
}
