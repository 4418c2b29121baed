//! Queueing-network definitions and their uniformized kernels.
//!
//! Two families are supported: multiclass queueing networks (single-server
//! stations, one buffer per class, Markovian routing between classes) and
//! the two-server N-model with a flexible server.
//!
//! # File format
//!
//! Networks are JSON documents tagged by `kind`. Classes and stations are
//! zero-indexed. Rates may be numbers or exact fractions written as strings.
//!
//! ```json
//! {
//!   "kind": "network",
//!   "name": "criss-cross",
//!   "num_stations": 2,
//!   "classes": [
//!     { "station": 0, "arrival_rate": 0.3, "service_rate": 2, "holding_cost": 1 },
//!     { "station": 1, "arrival_rate": 0, "service_rate": 1.5, "holding_cost": 1 },
//!     { "station": 0, "arrival_rate": "3/10", "service_rate": 2, "holding_cost": 1 }
//!   ],
//!   "routing": [ { "from": 0, "to": 1, "probability": 1 } ],
//!   "cost_form": "linear"
//! }
//! ```
//!
//! ```json
//! { "kind": "n-model", "name": "n-model", "rho": 0.95 }
//! ```

use crate::error::{Error, Result};
use crate::mdp::{self, Choice, ControlModel, Layout, Move, State};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;

/// A rate or probability: a plain number or an exact fraction such as `"9/140"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rate {
    Number(f64),
    Fraction(String),
}

impl Rate {
    pub fn value(&self) -> Option<f64> {
        match self {
            Rate::Number(v) => Some(*v),
            Rate::Fraction(s) => {
                let s = s.trim();
                match s.split_once('/') {
                    Some((n, d)) => {
                        let n: i64 = n.trim().parse().ok()?;
                        let d: i64 = d.trim().parse().ok()?;
                        if d == 0 {
                            return None;
                        }
                        let r = Ratio::new(n, d);
                        Some(*r.numer() as f64 / *r.denom() as f64)
                    }
                    None => s.parse().ok(),
                }
            }
        }
    }
}

impl From<f64> for Rate {
    fn from(v: f64) -> Self {
        Rate::Number(v)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostForm {
    #[default]
    Linear,
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub station: usize,
    pub arrival_rate: Rate,
    pub service_rate: Rate,
    #[serde(default = "unit_rate")]
    pub holding_cost: Rate,
}

fn unit_rate() -> Rate {
    Rate::Number(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub from: usize,
    pub to: usize,
    pub probability: Rate,
}

/// Declarative multiclass queueing network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub num_stations: usize,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub routing: Vec<RouteSpec>,
    #[serde(default)]
    pub cost_form: CostForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regeneration_state: Option<Vec<u32>>,
}

/// The N-model: server 1 serves class 1, server 2 serves both classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NModelSpec {
    pub name: String,
    pub rho: f64,
    #[serde(default)]
    pub cost_form: CostForm,
}

/// A model file of either family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelFile {
    Network(NetworkSpec),
    NModel(NModelSpec),
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn name(&self) -> &str {
        match self {
            ModelFile::Network(s) => &s.name,
            ModelFile::NModel(s) => &s.name,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model specs always serialize");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Vec<Violation> {
        match self {
            ModelFile::Network(s) => validate(s),
            ModelFile::NModel(s) => validate_nmodel(s),
        }
    }

    pub fn compile(&self) -> Result<Model> {
        match self {
            ModelFile::Network(s) => Ok(Model::Network(CompiledNetwork::new(s.clone())?)),
            ModelFile::NModel(s) => Ok(Model::NModel(CompiledNModel::new(s.clone())?)),
        }
    }
}

/// A failed invariant, naming the offending index.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoClasses,
    StationOutOfRange { class: usize, station: usize },
    StationWithoutClass { station: usize },
    BadRate { class: usize, field: &'static str },
    NegativeArrivalRate { class: usize },
    NonPositiveServiceRate { class: usize },
    NonPositiveHoldingCost { class: usize },
    RoutingIndexOutOfRange { entry: usize },
    RoutingProbabilityOutOfRange { from: usize, to: usize },
    RowNotSubstochastic { class: usize, sum: f64 },
    RoutingNotTransient { spectral_radius: f64 },
    LoadExceedsOne { station: usize, load: f64 },
    RegenerationStateLength { expected: usize, got: usize },
    RhoOutOfRange { rho: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoClasses => write!(f, "network has no classes"),
            Violation::StationOutOfRange { class, station } => {
                write!(f, "class {class} assigned to missing station {station}")
            }
            Violation::StationWithoutClass { station } => write!(f, "station {station} serves no class"),
            Violation::BadRate { class, field } => write!(f, "class {class}: unparsable {field}"),
            Violation::NegativeArrivalRate { class } => write!(f, "class {class}: negative arrival rate"),
            Violation::NonPositiveServiceRate { class } => write!(f, "class {class}: service rate must be positive"),
            Violation::NonPositiveHoldingCost { class } => write!(f, "class {class}: holding cost must be positive"),
            Violation::RoutingIndexOutOfRange { entry } => write!(f, "routing entry {entry} names a missing class"),
            Violation::RoutingProbabilityOutOfRange { from, to } => {
                write!(f, "routing {from}->{to}: probability outside [0, 1]")
            }
            Violation::RowNotSubstochastic { class, sum } => {
                write!(f, "routing row of class {class} sums to {sum} > 1")
            }
            Violation::RoutingNotTransient { spectral_radius } => {
                write!(f, "routing spectral radius {spectral_radius:.6} is not below 1")
            }
            Violation::LoadExceedsOne { station, load } => write!(f, "station {station} has load {load:.6} >= 1"),
            Violation::RegenerationStateLength { expected, got } => {
                write!(f, "regeneration state has {got} entries, expected {expected}")
            }
            Violation::RhoOutOfRange { rho } => write!(f, "rho {rho} outside (0, 1)"),
        }
    }
}

/// Solution of the traffic equation `q = λ + Rᵀq`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrafficSolution {
    pub q: Vec<f64>,
    pub rho: Vec<f64>,
    pub b: f64,
}

struct Parsed {
    lambda: Vec<f64>,
    mu: Vec<f64>,
    h: Vec<f64>,
    routing: Vec<Vec<f64>>,
}

fn parse(spec: &NetworkSpec, violations: &mut Vec<Violation>) -> Parsed {
    let j = spec.classes.len();
    let mut get = |class: usize, field: &'static str, r: &Rate| match r.value() {
        Some(v) if v.is_finite() => v,
        _ => {
            violations.push(Violation::BadRate { class, field });
            f64::NAN
        }
    };
    let mut lambda = Vec::with_capacity(j);
    let mut mu = Vec::with_capacity(j);
    let mut h = Vec::with_capacity(j);
    for (c, cls) in spec.classes.iter().enumerate() {
        lambda.push(get(c, "arrival_rate", &cls.arrival_rate));
        mu.push(get(c, "service_rate", &cls.service_rate));
        h.push(get(c, "holding_cost", &cls.holding_cost));
    }
    let mut routing = vec![vec![0.0; j]; j];
    for (e, r) in spec.routing.iter().enumerate() {
        if r.from >= j || r.to >= j {
            violations.push(Violation::RoutingIndexOutOfRange { entry: e });
            continue;
        }
        match r.probability.value() {
            Some(p) if (0.0..=1.0).contains(&p) => routing[r.from][r.to] += p,
            _ => violations.push(Violation::RoutingProbabilityOutOfRange { from: r.from, to: r.to }),
        }
    }
    Parsed { lambda, mu, h, routing }
}

/// Spectral radius of a nonnegative square matrix by repeated squaring.
pub fn spectral_radius(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let norm = |a: &[Vec<f64>]| a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let n0 = norm(m);
    if n0 == 0.0 {
        return 0.0;
    }
    let mut a: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| v / n0).collect()).collect();
    let mut log_scale = n0.ln();
    let mut power = 1.0f64;
    for _ in 0..48 {
        let mut sq = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i][k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    sq[i][j] += aik * a[k][j];
                }
            }
        }
        let s = norm(&sq);
        if s == 0.0 {
            return 0.0;
        }
        for row in sq.iter_mut() {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        a = sq;
        log_scale = 2.0 * log_scale + s.ln();
        power *= 2.0;
    }
    (log_scale / power).exp()
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn traffic_from(spec: &NetworkSpec, p: &Parsed) -> Result<TrafficSolution> {
    let j = p.lambda.len();
    let radius = spectral_radius(&p.routing);
    if radius >= 1.0 - 1e-9 {
        return Err(Error::SingularRouting(radius));
    }
    let a: Vec<Vec<f64>> =
        (0..j).map(|r| (0..j).map(|c| if r == c { 1.0 } else { 0.0 } - p.routing[c][r]).collect()).collect();
    let q = solve_dense(a, p.lambda.clone());
    let mut rho = vec![0.0; spec.num_stations];
    for (c, cls) in spec.classes.iter().enumerate() {
        if cls.station < spec.num_stations {
            rho[cls.station] += q[c] / p.mu[c];
        }
    }
    let b = p.lambda.iter().sum::<f64>() + p.mu.iter().sum::<f64>();
    Ok(TrafficSolution { q, rho, b })
}

/// Per-class total arrival rates, station loads and the uniformization constant.
pub fn solve_traffic(spec: &NetworkSpec) -> Result<TrafficSolution> {
    let mut v = Vec::new();
    let p = parse(spec, &mut v);
    if !v.is_empty() {
        return Err(Error::InvalidNetwork(join(&v)));
    }
    traffic_from(spec, &p)
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Every violated invariant; empty when the network is valid.
pub fn validate(spec: &NetworkSpec) -> Vec<Violation> {
    let mut v = Vec::new();
    let j = spec.classes.len();
    if j == 0 {
        v.push(Violation::NoClasses);
        return v;
    }
    let p = parse(spec, &mut v);
    let mut served = vec![false; spec.num_stations];
    for (c, cls) in spec.classes.iter().enumerate() {
        if cls.station >= spec.num_stations {
            v.push(Violation::StationOutOfRange { class: c, station: cls.station });
        } else {
            served[cls.station] = true;
        }
        if p.lambda[c] < 0.0 {
            v.push(Violation::NegativeArrivalRate { class: c });
        }
        if !(p.mu[c] > 0.0) {
            v.push(Violation::NonPositiveServiceRate { class: c });
        }
        if !(p.h[c] > 0.0) {
            v.push(Violation::NonPositiveHoldingCost { class: c });
        }
    }
    for (s, ok) in served.iter().enumerate() {
        if !ok {
            v.push(Violation::StationWithoutClass { station: s });
        }
    }
    for (c, row) in p.routing.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if sum > 1.0 + 1e-12 {
            v.push(Violation::RowNotSubstochastic { class: c, sum });
        }
    }
    if let Some(x) = &spec.regeneration_state {
        if x.len() != j {
            v.push(Violation::RegenerationStateLength { expected: j, got: x.len() });
        }
    }
    if !v.is_empty() {
        return v;
    }
    match traffic_from(spec, &p) {
        Err(Error::SingularRouting(r)) => v.push(Violation::RoutingNotTransient { spectral_radius: r }),
        Err(_) => {}
        Ok(t) => {
            for (s, &load) in t.rho.iter().enumerate() {
                if !(load < 1.0) {
                    v.push(Violation::LoadExceedsOne { station: s, load });
                }
            }
        }
    }
    v
}

pub fn validate_nmodel(spec: &NModelSpec) -> Vec<Violation> {
    if spec.rho > 0.0 && spec.rho < 1.0 {
        Vec::new()
    } else {
        vec![Violation::RhoOutOfRange { rho: spec.rho }]
    }
}

fn holding(form: CostForm, h: &[f64], x: &[u32]) -> f64 {
    match form {
        CostForm::Linear => h.iter().zip(x).map(|(h, &x)| h * x as f64).sum(),
        CostForm::Quadratic => h.iter().zip(x).map(|(h, &x)| h * (x as f64) * (x as f64)).sum(),
    }
}

/// A validated network with precomputed uniformized move probabilities.
#[derive(Clone, Debug)]
pub struct CompiledNetwork {
    pub spec: NetworkSpec,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub holding_cost: Vec<f64>,
    pub station_of: Vec<usize>,
    pub traffic: TrafficSolution,
    arrivals: Vec<(usize, f64)>,
    services: Vec<Vec<(Move, f64)>>,
    layout: Layout,
    regeneration: State,
}

impl CompiledNetwork {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let v = validate(&spec);
        if !v.is_empty() {
            return Err(Error::InvalidNetwork(join(&v)));
        }
        let mut sink = Vec::new();
        let p = parse(&spec, &mut sink);
        let traffic = traffic_from(&spec, &p)?;
        let b = traffic.b;
        let j = spec.classes.len();
        let arrivals = (0..j).filter(|&c| p.lambda[c] > 0.0).map(|c| (c, p.lambda[c] / b)).collect();
        let services = (0..j)
            .map(|c| {
                let mut out = Vec::new();
                let mut exit = 1.0;
                for (k, &r) in p.routing[c].iter().enumerate() {
                    if r > 0.0 {
                        out.push((Move::Route(c, k), p.mu[c] * r / b));
                        exit -= r;
                    }
                }
                if exit > 1e-15 {
                    out.push((Move::Depart(c), p.mu[c] * exit / b));
                }
                out
            })
            .collect();
        let station_of: Vec<usize> = spec.classes.iter().map(|c| c.station).collect();
        let layout = Layout::new(
            (0..spec.num_stations)
                .map(|s| {
                    std::iter::once(Choice::Idle)
                        .chain((0..j).filter(|&c| station_of[c] == s).map(Choice::Serve))
                        .collect()
                })
                .collect(),
        );
        let regeneration = spec.regeneration_state.clone().unwrap_or_else(|| vec![0; j]);
        Ok(Self {
            lambda: p.lambda,
            mu: p.mu,
            holding_cost: p.h,
            station_of,
            traffic,
            arrivals,
            services,
            layout,
            regeneration,
            spec,
        })
    }

    pub fn uniformization_rate(&self) -> f64 {
        self.traffic.b
    }

    /// Classes served at `station`, ascending.
    pub fn classes_at(&self, station: usize) -> Vec<usize> {
        (0..self.station_of.len()).filter(|&c| self.station_of[c] == station).collect()
    }

    /// Moves caused by completing one class-`c` service.
    pub fn service_moves(&self, c: usize) -> &[(Move, f64)] {
        &self.services[c]
    }
}

impl ControlModel for CompiledNetwork {
    fn num_classes(&self) -> usize {
        self.lambda.len()
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn cost(&self, x: &[u32]) -> f64 {
        holding(self.spec.cost_form, &self.holding_cost, x)
    }

    fn regeneration_state(&self) -> &[u32] {
        &self.regeneration
    }

    fn base_moves(&self, _x: &[u32], out: &mut Vec<(Move, f64)>) {
        out.extend(self.arrivals.iter().map(|&(c, p)| (Move::Arrive(c), p)));
    }

    fn choice_moves(&self, x: &[u32], station: usize, choice: usize, out: &mut Vec<(Move, f64)>) {
        if let Choice::Serve(c) = self.layout.choices(station)[choice] {
            if x[c] >= 1 {
                out.extend_from_slice(&self.services[c]);
            }
        }
    }
}

/// Compiled N-model. Station 0 is server 1 (class 0 only); station 1 is the
/// flexible server whose two choices are the priority rules a=1 (class 0
/// first) and a=2 (class 1 first). Both servers are work-conserving.
#[derive(Clone, Debug)]
pub struct CompiledNModel {
    pub spec: NModelSpec,
    pub lambda: [f64; 2],
    pub mu: [f64; 3],
    pub holding_cost: [f64; 2],
    b: f64,
    layout: Layout,
    regeneration: State,
}

impl CompiledNModel {
    pub fn new(spec: NModelSpec) -> Result<Self> {
        let v = validate_nmodel(&spec);
        if !v.is_empty() {
            return Err(Error::InvalidNetwork(join(&v)));
        }
        let lambda = [1.3 * spec.rho, 0.4 * spec.rho];
        let mu = [1.0, 0.5, 1.0];
        let b = lambda.iter().sum::<f64>() + mu.iter().sum::<f64>();
        let layout = Layout::new(vec![vec![Choice::Serve(0)], vec![Choice::Serve(0), Choice::Serve(1)]]);
        Ok(Self { spec, lambda, mu, holding_cost: [3.0, 1.0], b, layout, regeneration: vec![0, 0] })
    }

    pub fn uniformization_rate(&self) -> f64 {
        self.b
    }
}

impl ControlModel for CompiledNModel {
    fn num_classes(&self) -> usize {
        2
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn cost(&self, x: &[u32]) -> f64 {
        holding(self.spec.cost_form, &self.holding_cost, x)
    }

    fn regeneration_state(&self) -> &[u32] {
        &self.regeneration
    }

    fn base_moves(&self, _x: &[u32], out: &mut Vec<(Move, f64)>) {
        out.push((Move::Arrive(0), self.lambda[0] / self.b));
        out.push((Move::Arrive(1), self.lambda[1] / self.b));
    }

    fn choice_moves(&self, x: &[u32], station: usize, choice: usize, out: &mut Vec<(Move, f64)>) {
        let b = self.b;
        match (station, choice) {
            (0, _) => {
                if x[0] > 0 {
                    out.push((Move::Depart(0), self.mu[0] / b));
                }
            }
            (_, 0) => {
                if x[0] > 1 {
                    out.push((Move::Depart(0), self.mu[1] / b));
                } else if x[1] > 0 {
                    out.push((Move::Depart(1), self.mu[2] / b));
                }
            }
            _ => {
                if x[1] > 0 {
                    out.push((Move::Depart(1), self.mu[2] / b));
                } else if x[0] > 1 {
                    out.push((Move::Depart(0), self.mu[1] / b));
                }
            }
        }
    }

    fn is_feasible(&self, _x: &[u32], _station: usize, _choice: usize) -> bool {
        true
    }
}

/// Exact N-model kernel under control `a` (1 or 2).
pub fn nmodel_transition_distribution(model: &CompiledNModel, x: &[u32], a: u8) -> Vec<(State, f64)> {
    assert!(a == 1 || a == 2, "N-model control is 1 or 2");
    mdp::transition_distribution(model, x, &[0, a - 1]).expect("N-model controls are always feasible")
}

/// Either compiled family behind one type.
#[derive(Clone, Debug)]
pub enum Model {
    Network(CompiledNetwork),
    NModel(CompiledNModel),
}

impl Model {
    pub fn uniformization_rate(&self) -> f64 {
        match self {
            Model::Network(m) => m.uniformization_rate(),
            Model::NModel(m) => m.uniformization_rate(),
        }
    }

    pub fn as_network(&self) -> Option<&CompiledNetwork> {
        match self {
            Model::Network(m) => Some(m),
            Model::NModel(_) => None,
        }
    }
}

impl ControlModel for Model {
    fn num_classes(&self) -> usize {
        match self {
            Model::Network(m) => m.num_classes(),
            Model::NModel(m) => m.num_classes(),
        }
    }

    fn layout(&self) -> &Layout {
        match self {
            Model::Network(m) => m.layout(),
            Model::NModel(m) => m.layout(),
        }
    }

    fn cost(&self, x: &[u32]) -> f64 {
        match self {
            Model::Network(m) => m.cost(x),
            Model::NModel(m) => m.cost(x),
        }
    }

    fn regeneration_state(&self) -> &[u32] {
        match self {
            Model::Network(m) => m.regeneration_state(),
            Model::NModel(m) => m.regeneration_state(),
        }
    }

    fn base_moves(&self, x: &[u32], out: &mut Vec<(Move, f64)>) {
        match self {
            Model::Network(m) => m.base_moves(x, out),
            Model::NModel(m) => m.base_moves(x, out),
        }
    }

    fn choice_moves(&self, x: &[u32], station: usize, choice: usize, out: &mut Vec<(Move, f64)>) {
        match self {
            Model::Network(m) => m.choice_moves(x, station, choice, out),
            Model::NModel(m) => m.choice_moves(x, station, choice, out),
        }
    }

    fn is_feasible(&self, x: &[u32], station: usize, choice: usize) -> bool {
        match self {
            Model::Network(m) => m.is_feasible(x, station, choice),
            Model::NModel(m) => m.is_feasible(x, station, choice),
        }
    }
}
