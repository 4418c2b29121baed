use qnppo::evaluation::{evaluate_policy, EvalBudget, EvalPlan};
use qnppo::fixtures::{self, Regime};
use qnppo::mdp::sample_action;
use qnppo::network::{CompiledNModel, CompiledNetwork};
use qnppo::nn::{Architecture, Mlp};
use qnppo::policy::{clone_from_teacher, log_prob, masked_softmax, Checkpoint, CloneConfig, NetworkRecord};
use qnppo::rng::{stream, Purpose};
use qnppo::simulation::run_steps;
use qnppo::{ControlModel, Error, Policy, StepMode};

fn criss_cross() -> CompiledNetwork {
    CompiledNetwork::new(fixtures::criss_cross(Regime::IL)).unwrap()
}

#[test]
fn pr_law_is_proportional() {
    let m = criss_cross();
    let law = Policy::ProportionallyRandomized.action_law(&m, &[2, 1, 3]);
    // Station 0: idle, class 0, class 2. Station 1: idle, class 1.
    let expected = [0.0, 0.4, 0.6, 0.0, 1.0];
    for (p, e) in law.probs.iter().zip(expected) {
        assert!((p - e).abs() < 1e-15);
    }
    let law = Policy::ProportionallyRandomized.action_law(&m, &[0, 0, 0]);
    assert_eq!(law.probs, vec![1.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn lbfs_prefers_the_highest_class() {
    let m = criss_cross();
    let law = Policy::lbfs(3).action_law(&m, &[1, 0, 1]);
    assert_eq!(law.probs, vec![0.0, 0.0, 1.0, 1.0, 0.0]);
    let law = Policy::lbfs(3).action_law(&m, &[1, 2, 0]);
    assert_eq!(law.probs, vec![0.0, 1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn threshold_switches_above_t() {
    let m = CompiledNModel::new(fixtures::n_model(0.95)).unwrap();
    let p = Policy::Threshold(5);
    // Flexible server: choice 0 favours class 1, choice 1 favours class 2.
    assert_eq!(&p.action_law(&m, &[6, 3]).probs[1..], &[1.0, 0.0]);
    assert_eq!(&p.action_law(&m, &[5, 3]).probs[1..], &[0.0, 1.0]);
}

#[test]
fn uniform_spreads_over_feasible_choices() {
    let m = criss_cross();
    let law = Policy::UniformRandom.action_law(&m, &[0, 2, 1]);
    assert_eq!(law.probs, vec![0.5, 0.0, 0.5, 0.5, 0.5]);
}

#[test]
fn laws_are_normalized_and_masked() {
    let m = criss_cross();
    let mut rng = stream(4, Purpose::Init, 0, 0);
    let net = Mlp::xavier(&Architecture::policy(3, 2, 5), &mut rng);
    let policies = [
        Policy::Neural(net),
        Policy::ProportionallyRandomized,
        Policy::lbfs(3),
        Policy::UniformRandom,
        Policy::StaticPriority(vec![1, 0, 2]),
    ];
    let layout = m.layout().clone();
    for p in &policies {
        for x in [[0, 0, 0], [3, 0, 0], [0, 4, 1], [2, 2, 2], [0, 0, 9]] {
            let law = p.action_law(&m, &x);
            for l in 0..2 {
                let s: f64 = law.station(&layout, l).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                for c in 0..layout.choices(l).len() {
                    if !m.is_feasible(&x, l, c) {
                        assert_eq!(law.station(&layout, l)[c], 0.0, "{} at {x:?}", p.name());
                    }
                }
            }
        }
    }
}

#[test]
fn sampling_frequencies_match_the_law() {
    let m = criss_cross();
    let law = Policy::ProportionallyRandomized.action_law(&m, &[2, 1, 3]);
    let mut rng = stream(21, Purpose::Actor, 0, 0);
    let mut a = [0u8; 2];
    let n = 1_000_000;
    let mut hits = 0;
    for _ in 0..n {
        sample_action(m.layout(), &law.probs, &mut rng, &mut a);
        hits += (a[0] == 1) as usize;
        assert_eq!(a[1], 1);
    }
    let f = hits as f64 / n as f64;
    assert!((f - 0.4).abs() < 0.002, "{f}");
}

#[test]
fn empty_system_samples_all_idle() {
    let m = criss_cross();
    let law = Policy::ProportionallyRandomized.action_law(&m, &[0, 0, 0]);
    let mut a = [9u8; 2];
    sample_action(m.layout(), &law.probs, &mut stream(0, Purpose::Actor, 0, 0), &mut a);
    assert_eq!(a, [0, 0]);
}

#[test]
fn log_probabilities() {
    let m = criss_cross();
    assert_eq!(log_prob(&Policy::lbfs(3), &m, &[1, 1, 1], &[2, 1]).unwrap(), 0.0);
    let lp = log_prob(&Policy::ProportionallyRandomized, &m, &[2, 1, 3], &[1, 1]).unwrap();
    assert!((lp - 0.4f64.ln()).abs() < 1e-15);
    let net = Mlp::xavier(&Architecture::policy(3, 2, 5), &mut stream(2, Purpose::Init, 0, 0));
    let r = log_prob(&Policy::Neural(net.clone()), &m, &[0, 1, 1], &[1, 0]);
    assert!(matches!(r, Err(Error::ZeroProbabilityAction { station: 0 })));
    let law = Policy::Neural(net.clone()).action_law(&m, &[1, 0, 2]);
    let lp = log_prob(&Policy::Neural(net), &m, &[1, 0, 2], &[2, 0]).unwrap();
    assert!((lp - (law.probs[2] * law.probs[3]).ln()).abs() < 1e-12);
}

#[test]
fn zero_logits_give_uniform_feasible_mass_with_masked_mass_on_idle() {
    let m = criss_cross();
    let mut out = vec![0.0; 5];
    masked_softmax(&m, &[1, 0, 1], &[0.0; 5], &mut out);
    let third = 1.0 / 3.0;
    for (p, e) in out.iter().zip([third, third, third, 1.0, 0.0]) {
        assert!((p - e).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_shift_invariant_per_station() {
    let m = criss_cross();
    let logits = [0.3, -1.2, 2.0, 0.5, -0.7];
    let shifted = [5.3, 3.8, 7.0, -9.5, -10.7];
    let (mut a, mut b) = (vec![0.0; 5], vec![0.0; 5]);
    masked_softmax(&m, &[1, 1, 0], &logits, &mut a);
    masked_softmax(&m, &[1, 1, 0], &shifted, &mut b);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn cloning_memorizes_a_single_state() {
    let m = criss_cross();
    let x = vec![2, 1, 3];
    let states = vec![x.clone(); 64];
    let targets = vec![vec![0.0, 0.0, 1.0, 0.0, 1.0]; 64];
    let cfg = CloneConfig { learning_rate: 5e-3, minibatch: 16, target_kl: 1e-3, ..CloneConfig::default() };
    let (net, report) = clone_from_teacher(&m, &states, &targets, &cfg).unwrap();
    let law = Policy::Neural(net).action_law(&m, &x);
    assert!(law.probs[2] >= 0.99, "{:?} after {} epochs", law.probs, report.epochs);
}

#[test]
fn cloning_needs_data() {
    let m = criss_cross();
    assert!(matches!(clone_from_teacher(&m, &[], &[], &CloneConfig::default()), Err(Error::InsufficientData(_))));
}

#[test]
fn cloned_pr_policy_performs_like_pr() {
    let m = CompiledNetwork::new(fixtures::six_class(2)).unwrap();
    let teacher = Policy::ProportionallyRandomized;
    let mut rng = stream(3, Purpose::Actor, 0, 0);
    let ep = run_steps(&m, &mut teacher.runner(&m), &[0; 6], 100_000, StepMode::EveryTransition, &mut rng);
    let xs = ep.visited();
    let targets: Vec<Vec<f64>> = xs.iter().map(|x| teacher.action_law(&m, x).probs).collect();
    let cfg =
        CloneConfig { minibatch: 256, learning_rate: 2e-3, target_kl: 0.02, max_epochs: 60, ..CloneConfig::default() };
    let (net, report) = clone_from_teacher(&m, &xs, &targets, &cfg).unwrap();
    assert!(report.heldout_kl < 0.05, "held-out KL {}", report.heldout_kl);
    let plan = EvalPlan::new(EvalBudget::Arrivals(200_000), 5);
    let pr = evaluate_policy(&m, &teacher, &plan).unwrap();
    let cloned = evaluate_policy(&m, &Policy::Neural(net), &plan).unwrap();
    assert!((cloned.mean - pr.mean).abs() < 0.1 * pr.mean, "cloned {} vs PR {}", cloned.mean, pr.mean);
}

#[test]
fn checkpoints_roundtrip_and_check_the_network() {
    let spec = qnppo::network::ModelFile::Network(fixtures::criss_cross(Regime::IL));
    let other = qnppo::network::ModelFile::Network(fixtures::criss_cross(Regime::BH));
    let mut net = Mlp::xavier(&Architecture::policy(3, 2, 5), &mut stream(8, Purpose::Init, 0, 0));
    net.input_scale = 0.5;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint-0010.json");
    Checkpoint::new(10, &spec, &net, None).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.iteration, 10);
    assert_eq!(ck.policy_for(&spec).unwrap(), net);
    assert!(matches!(ck.policy_for(&other), Err(Error::CheckpointMismatch(_))));
    let rec = NetworkRecord::from_mlp(&net);
    assert_eq!(rec.layers[0].rows, 30);
    assert_eq!(rec.layers[0].cols, 3);
}
