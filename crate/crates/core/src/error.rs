use thiserror::Error;

/// Failures raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("routing matrix is not transient (spectral radius {0:.6} >= 1)")]
    SingularRouting(f64),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("action serves an empty buffer at station {station}")]
    InfeasibleAction { station: usize },
    #[error("action has zero probability at station {station}")]
    ZeroProbabilityAction { station: usize },
    #[error("no complete regenerative cycle in the batch")]
    NoCompleteCycle,
    #[error("no regeneration after step {0}")]
    NoRegenerationAfter(usize),
    #[error("regeneration state never visited")]
    RegenerationNeverVisited,
    #[error("cycle budget of {0} steps exceeded")]
    CycleBudgetExceeded(usize),
    #[error("actor {actor}: {source}")]
    Actor { actor: usize, source: Box<Error> },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("too few cycles: {0} (need at least {1})")]
    TooFewCycles(usize, usize),
    #[error("episode too short: {0} steps (need at least {1})")]
    EpisodeTooShort(usize, usize),
    #[error("non-finite parameter in network")]
    NonFiniteParameter,
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("unstable policy at iteration {iteration}: {source}")]
    UnstablePolicy { iteration: usize, source: Box<Error> },
    #[error("value iteration did not converge in {0} sweeps")]
    Diverged(usize),
    #[error("truncation box too small: sensitivity {0:.4}%")]
    BoxTooSmall(f64),
    #[error("truncated chain is reducible: {0} states unreachable from the regeneration state")]
    Reducible(usize),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("checkpoint does not match network: {0}")]
    CheckpointMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
