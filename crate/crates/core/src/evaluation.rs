//! Long-run performance estimates with confidence intervals.
//!
//! Light and medium loads are measured by regenerative simulation: the run
//! stops after a fixed number of returns to x* and the interval comes from
//! the ratio estimator over i.i.d. cycles. Heavy loads are measured by one
//! long run stopped after a fixed number of external arrivals, with batch
//! means over 50 consecutive segments.

use crate::error::{Error, Result};
use crate::mdp::{is_regeneration, ControlModel, LawSource, Move, StepMode, Stepper};
use crate::network::CompiledNetwork;
use crate::par;
use crate::policy::{CachedLaws, Checkpoint, Policy};
use crate::rng::{stream, Purpose};
use crate::simulation::{run_fcfs_eval, BlockSums, Episode, FcfsOrder, LAW_CACHE_CAPACITY};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Fewest cycles accepted by [`regenerative_ci`].
pub const MIN_CYCLES: usize = 30;
/// Fewest steps per batch accepted by [`batch_means_ci`].
pub const MIN_BATCH_STEPS: usize = 100;
pub const DEFAULT_BATCHES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    Regenerative,
    BatchMeans,
}

impl CiMethod {
    pub fn label(self) -> &'static str {
        match self {
            CiMethod::Regenerative => "regenerative",
            CiMethod::BatchMeans => "batch-means",
        }
    }
}

/// Point estimate of the average cost with a confidence half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfEstimate {
    pub mean: f64,
    pub half_width: f64,
    pub confidence: f64,
    pub method: CiMethod,
    pub cycles: u64,
    pub arrivals: u64,
    pub steps: u64,
    pub seed: u64,
}

impl PerfEstimate {
    /// Standard error implied by the half-width.
    pub fn std_error(&self) -> f64 {
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + 0.5 * self.confidence);
        self.half_width / z
    }

    pub fn covers(&self, value: f64) -> bool {
        (self.mean - value).abs() <= self.half_width
    }

    pub const CSV_HEADER: [&'static str; 8] =
        ["mean", "half_width", "confidence", "method", "cycles", "arrivals", "steps", "seed"];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            format!("{}", self.mean),
            format!("{}", self.half_width),
            format!("{}", self.confidence),
            self.method.label().to_string(),
            self.cycles.to_string(),
            self.arrivals.to_string(),
            self.steps.to_string(),
            self.seed.to_string(),
        ]
    }
}

fn normal_quantile(confidence: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + 0.5 * confidence)
}

/// Two-sided Student-t quantile with `dof` degrees of freedom.
pub fn t_quantile(confidence: f64, dof: usize) -> f64 {
    StudentsT::new(0.0, 1.0, dof as f64).unwrap().inverse_cdf(0.5 + 0.5 * confidence)
}

/// Ratio estimator over cycles with cost sums `y` and lengths `tau`.
pub fn regenerative_ci_from_cycles(y: &[f64], tau: &[u64], confidence: f64) -> Result<PerfEstimate> {
    let m = y.len();
    if m < MIN_CYCLES {
        return Err(Error::TooFewCycles(m, MIN_CYCLES));
    }
    let total_y: f64 = y.iter().sum();
    let total_t: u64 = tau.iter().sum();
    let mean = total_y / total_t as f64;
    let mean_tau = total_t as f64 / m as f64;
    let z: Vec<f64> = y.iter().zip(tau).map(|(&y, &t)| y - mean * t as f64).collect();
    let zbar = z.iter().sum::<f64>() / m as f64;
    let var = z.iter().map(|v| (v - zbar) * (v - zbar)).sum::<f64>() / (m - 1) as f64;
    let se = (var / m as f64).sqrt() / mean_tau;
    Ok(PerfEstimate {
        mean,
        half_width: normal_quantile(confidence) * se,
        confidence,
        method: CiMethod::Regenerative,
        cycles: m as u64,
        arrivals: 0,
        steps: total_t,
        seed: 0,
    })
}

/// Regenerative interval over the complete cycles of a cycle-mode episode.
pub fn regenerative_ci(ep: &Episode, confidence: f64) -> Result<PerfEstimate> {
    let (y, tau): (Vec<f64>, Vec<u64>) =
        ep.cycles().into_iter().map(|(a, b)| (ep.costs[a..b].iter().sum::<f64>(), (b - a) as u64)).unzip();
    let mut est = regenerative_ci_from_cycles(&y, &tau, confidence)?;
    est.seed = ep.seed;
    Ok(est)
}

/// Interval from i.i.d.-treated batch averages around `mean`.
fn from_batches(mean: f64, batches: &[f64], confidence: f64, steps: u64) -> PerfEstimate {
    let k = batches.len();
    let bbar = batches.iter().sum::<f64>() / k as f64;
    let var = batches.iter().map(|b| (b - bbar) * (b - bbar)).sum::<f64>() / (k - 1) as f64;
    PerfEstimate {
        mean,
        half_width: t_quantile(confidence, k - 1) * (var / k as f64).sqrt(),
        confidence,
        method: CiMethod::BatchMeans,
        cycles: 0,
        arrivals: 0,
        steps,
        seed: 0,
    }
}

/// Batch means over `num_batches` equal consecutive segments of step costs.
pub fn batch_means_from_costs(costs: &[f64], num_batches: usize, confidence: f64) -> Result<PerfEstimate> {
    let need = num_batches * MIN_BATCH_STEPS;
    if num_batches < 2 || costs.len() < need {
        return Err(Error::EpisodeTooShort(costs.len(), need));
    }
    let per = costs.len() / num_batches;
    let batches: Vec<f64> = costs.chunks(per).take(num_batches).map(|c| c.iter().sum::<f64>() / per as f64).collect();
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    Ok(from_batches(mean, &batches, confidence, costs.len() as u64))
}

pub fn batch_means_ci(ep: &Episode, num_batches: usize, confidence: f64) -> Result<PerfEstimate> {
    let mut est = batch_means_from_costs(&ep.costs, num_batches, confidence)?;
    est.seed = ep.seed;
    Ok(est)
}

/// Batch means from a streaming accumulator.
pub fn batch_means_from_blocks(blocks: &BlockSums, num_batches: usize, confidence: f64) -> Result<PerfEstimate> {
    let need = num_batches * MIN_BATCH_STEPS;
    if num_batches < 2 || blocks.steps < need {
        return Err(Error::EpisodeTooShort(blocks.steps, need));
    }
    let batches = blocks.batch_means(num_batches).ok_or(Error::EpisodeTooShort(blocks.steps, need))?;
    Ok(from_batches(blocks.mean(), &batches, confidence, blocks.steps as u64))
}

/// Run length of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalBudget {
    /// Stop at the M-th return to x*; regenerative interval.
    Cycles(u64),
    /// Stop at the A-th external arrival; batch-means interval.
    Arrivals(u64),
}

#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub budget: EvalBudget,
    pub mode: StepMode,
    pub seed: u64,
    /// Stream index, so concurrent evaluations sharing a seed stay independent.
    pub stream: u64,
    pub confidence: f64,
    pub num_batches: usize,
    /// Abort a cycles run that exceeds this many steps.
    pub max_steps: u64,
}

impl EvalPlan {
    pub fn new(budget: EvalBudget, seed: u64) -> Self {
        Self {
            budget,
            mode: StepMode::RealTransitionsOnly,
            seed,
            stream: 0,
            confidence: 0.95,
            num_batches: DEFAULT_BATCHES,
            max_steps: u64::MAX,
        }
    }
}

/// Simulates `policy` from x* and reports the long-run average cost.
pub fn evaluate_policy<M: ControlModel + ?Sized>(model: &M, policy: &Policy, plan: &EvalPlan) -> Result<PerfEstimate> {
    match policy {
        Policy::Neural(_) => {
            let mut src = CachedLaws::new(policy.runner(model), LAW_CACHE_CAPACITY);
            evaluate_source(model, &mut src, plan)
        }
        _ => evaluate_source(model, &mut policy.runner(model), plan),
    }
}

/// [`evaluate_policy`] for any law source.
pub fn evaluate_source<M: ControlModel + ?Sized>(
    model: &M,
    source: &mut (impl LawSource + ?Sized),
    plan: &EvalPlan,
) -> Result<PerfEstimate> {
    let mut rng = stream(plan.seed, Purpose::Evaluation, 0, plan.stream);
    let x_star = model.regeneration_state().to_vec();
    let mut stepper = Stepper::new(model, plan.mode);
    let mut x = x_star.clone();
    let mut est = match plan.budget {
        EvalBudget::Cycles(m) => {
            let mut y = Vec::with_capacity(m as usize);
            let mut tau = Vec::with_capacity(m as usize);
            let (mut sum, mut len, mut steps) = (0.0, 0u64, 0u64);
            while (y.len() as u64) < m {
                if steps >= plan.max_steps {
                    return Err(Error::CycleBudgetExceeded(plan.max_steps as usize));
                }
                let out = stepper.step(source, &mut x, &mut rng);
                sum += out.cost;
                len += 1;
                steps += 1;
                if is_regeneration(model, &x) {
                    y.push(sum);
                    tau.push(len);
                    sum = 0.0;
                    len = 0;
                }
            }
            regenerative_ci_from_cycles(&y, &tau, plan.confidence)?
        }
        EvalBudget::Arrivals(a) => {
            let mut base = Vec::new();
            model.base_moves(&x_star, &mut base);
            if !base.iter().any(|(m, p)| matches!(m, Move::Arrive(_)) && *p > 0.0) {
                let c = model.cost(&x_star);
                return Ok(PerfEstimate {
                    mean: c,
                    half_width: 0.0,
                    confidence: plan.confidence,
                    method: CiMethod::BatchMeans,
                    cycles: 0,
                    arrivals: 0,
                    steps: 0,
                    seed: plan.seed,
                });
            }
            let mut blocks = BlockSums::new();
            let mut arrivals = 0u64;
            while arrivals < a {
                let out = stepper.step(source, &mut x, &mut rng);
                blocks.push(out.cost);
                arrivals += out.arrival as u64;
            }
            let mut e = batch_means_from_blocks(&blocks, plan.num_batches, plan.confidence)?;
            e.arrivals = arrivals;
            e
        }
    };
    est.seed = plan.seed;
    Ok(est)
}

/// FCFS baseline on a network, always by arrivals with batch means.
pub fn evaluate_fcfs(net: &CompiledNetwork, order: FcfsOrder, plan: &EvalPlan) -> Result<PerfEstimate> {
    let arrivals = match plan.budget {
        EvalBudget::Arrivals(a) => a,
        EvalBudget::Cycles(_) => {
            return Err(Error::InsufficientData("FCFS is evaluated with an arrival budget".into()))
        }
    };
    let mut rng = stream(plan.seed, Purpose::Evaluation, 0, plan.stream);
    let run = run_fcfs_eval(net, arrivals as usize, order, &mut rng);
    let mut est = batch_means_from_blocks(&run.blocks, plan.num_batches, plan.confidence)?;
    est.arrivals = run.arrivals as u64;
    est.seed = plan.seed;
    Ok(est)
}

/// Checkpoint files `checkpoint-NNNN.json` in `dir`, sorted by iteration.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|_| Error::MissingCheckpoint(dir.display().to_string()))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(i) = name.strip_prefix("checkpoint-").and_then(|r| r.strip_suffix(".json")) {
            if let Ok(i) = i.parse::<usize>() {
                out.push((i, path));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::MissingCheckpoint(dir.display().to_string()));
    }
    out.sort();
    Ok(out)
}

/// One row of a learning curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub estimate: PerfEstimate,
}

/// Evaluates every checkpoint in `dir` independently; checkpoint `i` uses
/// stream `i` of the plan's seed.
pub fn learning_curve<M: ControlModel + ?Sized>(
    dir: &Path,
    spec: &crate::network::ModelFile,
    model: &M,
    plan: &EvalPlan,
) -> Result<Vec<CurvePoint>> {
    let files = list_checkpoints(dir)?;
    let rows = par::map_slice(&files, |(i, path)| {
        let net = Checkpoint::load(path)?.policy_for(spec)?;
        let mut p = plan.clone();
        p.stream = *i as u64;
        let estimate = evaluate_policy(model, &Policy::Neural(net), &p)?;
        Ok(CurvePoint { iteration: *i, estimate })
    });
    rows.into_iter().collect()
}

pub fn write_curve_csv<W: Write>(rows: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration"];
    header.extend(PerfEstimate::CSV_HEADER);
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.iteration.to_string()];
        row.extend(r.estimate.csv_fields());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
