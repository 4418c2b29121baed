//! Long-run average cost proximal policy optimization for multiclass
//! queueing networks.
//!
//! The crate compiles queueing networks into uniformized discrete-time
//! Markov decision processes, simulates them under randomized policies,
//! estimates relative value functions with regenerative and martingale
//! control-variate estimators, trains small tanh networks with a clipped
//! surrogate objective and checks everything against exact dynamic
//! programming on truncated state spaces.

pub mod dp;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod fixtures;
pub mod mdp;
pub mod network;
pub mod nn;
pub mod par;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
pub use mdp::{Choice, ControlModel, Layout, Move, StepMode};
pub use network::{Model, NModelSpec, NetworkSpec};
pub use policy::{ActionLaw, Policy};
