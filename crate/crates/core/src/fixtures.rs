//! Benchmark networks used throughout the experiments.

use crate::network::{ClassSpec, CostForm, ModelFile, NModelSpec, NetworkSpec, Rate, RouteSpec};

/// Criss-cross load regimes: imbalanced or balanced, light, medium or heavy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    IL,
    BL,
    IM,
    BM,
    IH,
    BH,
}

impl Regime {
    pub const ALL: [Regime; 6] = [Regime::IL, Regime::BL, Regime::IM, Regime::BM, Regime::IH, Regime::BH];

    pub fn label(self) -> &'static str {
        match self {
            Regime::IL => "IL",
            Regime::BL => "BL",
            Regime::IM => "IM",
            Regime::BM => "BM",
            Regime::IH => "IH",
            Regime::BH => "BH",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        Regime::ALL.into_iter().find(|r| r.label().eq_ignore_ascii_case(&s.replace('.', "")))
    }

    /// Arrival rate of classes 1 and 3.
    pub fn arrival_rate(self) -> f64 {
        match self {
            Regime::IL | Regime::BL => 0.3,
            Regime::IM | Regime::BM => 0.6,
            Regime::IH | Regime::BH => 0.9,
        }
    }

    /// Service rate of the downstream class.
    pub fn middle_rate(self) -> f64 {
        match self {
            Regime::IL | Regime::IM | Regime::IH => 1.5,
            Regime::BL | Regime::BM | Regime::BH => 1.0,
        }
    }

    /// Optimal average number of jobs reported for the regime.
    pub fn reference_optimum(self) -> f64 {
        match self {
            Regime::IL => 0.671,
            Regime::BL => 0.843,
            Regime::IM => 2.084,
            Regime::BM => 2.829,
            Regime::IH => 9.970,
            Regime::BH => 15.228,
        }
    }
}

fn class(station: usize, arrival: f64, service: Rate) -> ClassSpec {
    ClassSpec { station, arrival_rate: Rate::Number(arrival), service_rate: service, holding_cost: Rate::Number(1.0) }
}

/// Criss-cross network: classes 1 and 3 share station 1, class 1 feeds class 2 at station 2.
pub fn criss_cross(regime: Regime) -> NetworkSpec {
    criss_cross_with_cost(regime, CostForm::Linear)
}

pub fn criss_cross_with_cost(regime: Regime, cost_form: CostForm) -> NetworkSpec {
    let lam = regime.arrival_rate();
    let suffix = if cost_form == CostForm::Quadratic { "-quadratic" } else { "" };
    NetworkSpec {
        name: format!("criss-cross-{}{}", regime.label(), suffix),
        num_stations: 2,
        classes: vec![
            class(0, lam, Rate::Number(2.0)),
            class(1, 0.0, Rate::Number(regime.middle_rate())),
            class(0, lam, Rate::Number(2.0)),
        ],
        routing: vec![RouteSpec { from: 0, to: 1, probability: Rate::Number(1.0) }],
        cost_form,
        regeneration_state: None,
    }
}

/// Which class re-enters the network as the second chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SixClassFeed {
    /// The last class of the first chain continues into class 2.
    FirstChain,
    /// The last class of the third chain continues into class 2.
    ThirdChain,
    /// Class 2 has its own external arrivals; every chain departs at the end.
    External,
}

/// Extended six-class network with `stations` stations and three classes per station.
pub fn six_class(stations: usize) -> NetworkSpec {
    six_class_with_feed(stations, SixClassFeed::ThirdChain)
}

pub fn six_class_with_feed(stations: usize, feed: SixClassFeed) -> NetworkSpec {
    assert!(stations >= 2, "the extended network needs at least two stations");
    let odd = ["1/8", "1/2", "1/4"];
    let even = ["1/6", "1/7", "1"];
    let mut classes = Vec::with_capacity(3 * stations);
    for s in 0..stations {
        let rates = if s % 2 == 0 { odd } else { even };
        for (p, r) in rates.iter().enumerate() {
            let fed = feed == SixClassFeed::External || p != 1;
            let arrival = if s == 0 && fed { Rate::Fraction("9/140".into()) } else { Rate::Number(0.0) };
            classes.push(ClassSpec {
                station: s,
                arrival_rate: arrival,
                service_rate: Rate::Fraction((*r).into()),
                holding_cost: Rate::Number(1.0),
            });
        }
    }
    let mut routing = Vec::new();
    for s in 0..stations - 1 {
        for p in 0..3 {
            routing.push(RouteSpec { from: 3 * s + p, to: 3 * (s + 1) + p, probability: Rate::Number(1.0) });
        }
    }
    let last = 3 * (stations - 1);
    let from = match feed {
        SixClassFeed::FirstChain => Some(last),
        SixClassFeed::ThirdChain => Some(last + 2),
        SixClassFeed::External => None,
    };
    if let Some(from) = from {
        routing.push(RouteSpec { from, to: 1, probability: Rate::Number(1.0) });
    }
    NetworkSpec {
        name: format!("six-class-L{stations}"),
        num_stations: stations,
        classes,
        routing,
        cost_form: CostForm::Linear,
        regeneration_state: None,
    }
}

/// The N-model at traffic intensity `rho`.
pub fn n_model(rho: f64) -> NModelSpec {
    NModelSpec { name: format!("n-model-rho{rho}"), rho, cost_form: CostForm::Linear }
}

/// Single-class single-station queue.
pub fn mm1(lambda: f64, mu: f64) -> NetworkSpec {
    NetworkSpec {
        name: "mm1".into(),
        num_stations: 1,
        classes: vec![class(0, lambda, Rate::Number(mu))],
        routing: Vec::new(),
        cost_form: CostForm::Linear,
        regeneration_state: None,
    }
}

/// Every shipped fixture with its file stem.
pub fn all() -> Vec<(String, ModelFile)> {
    let mut out = Vec::new();
    for r in Regime::ALL {
        out.push((format!("criss-cross-{}", r.label()), ModelFile::Network(criss_cross(r))));
    }
    out.push((
        "criss-cross-BM-quadratic".into(),
        ModelFile::Network(criss_cross_with_cost(Regime::BM, CostForm::Quadratic)),
    ));
    for l in 2..=7 {
        out.push((format!("six-class-L{l}"), ModelFile::Network(six_class(l))));
    }
    let mut n = n_model(0.95);
    n.name = "n-model".into();
    out.push(("n-model".into(), ModelFile::NModel(n)));
    out.push(("mm1".into(), ModelFile::Network(mm1(0.5, 1.0))));
    out
}
