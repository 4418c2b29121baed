//! `qnppo` command-line runner.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qnppo::dp::{self, RviOptions, TruncationBox};
use qnppo::evaluation::{self, EvalBudget, EvalPlan, PerfEstimate};
use qnppo::network::{solve_traffic, ModelFile};
use qnppo::policy::Checkpoint;
use qnppo::ppo::{self, Algorithm, Initialization, IterationReport, TrainConfig};
use qnppo::simulation::FcfsOrder;
use qnppo::{estimators::Variant, fixtures, ControlModel, Model, Policy, StepMode};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Parser, Debug)]
#[command(name = "qnppo", version, about = "Average-cost PPO for multiclass queueing networks")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a network file and print its traffic solution.
    Validate {
        /// Model JSON file or shipped fixture name.
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write every shipped fixture as JSON.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Optimal average cost by relative value iteration on a truncation box.
    SolveDp(SolveDpArgs),
    /// Train a policy with one of the PPO algorithms.
    Train(TrainArgs),
    /// Estimate the long-run average cost of a checkpoint or baseline.
    Evaluate(EvaluateArgs),
    /// Evaluate every checkpoint of a training run.
    LearningCurve(CurveArgs),
}

#[derive(Args, Debug)]
struct SolveDpArgs {
    model: String,
    /// Per-class caps, comma separated, or one cap for every class.
    #[arg(long, value_delimiter = ',', required = true)]
    caps: Vec<u32>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Skip the caps+10 re-solve.
    #[arg(long)]
    no_sensitivity: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Estimator {
    Amp,
    Gae,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    /// Fifty actors, 5000 cycles, 200 iterations.
    Full,
    /// Five actors, 500 cycles, 50 iterations.
    Desk,
    /// Algorithm 3 for the extended networks: ten actors, horizon 10⁴, 50 iterations.
    DeskExtended,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Xavier,
    ClonePr,
}

#[derive(Args, Debug)]
struct TrainArgs {
    model: String,
    /// JSON training config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    algorithm: Option<u8>,
    #[arg(long, value_enum)]
    estimator: Option<Estimator>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    actors: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Algorithm 3 actors that restart from x* every iteration.
    #[arg(long)]
    anchored_actors: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// States simulated under PR for behaviour cloning.
    #[arg(long, default_value_t = 100_000)]
    clone_states: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct BudgetArgs {
    /// Regenerative cycles from x*.
    #[arg(long, conflicts_with = "arrivals")]
    cycles: Option<u64>,
    /// External arrivals, with batch means.
    #[arg(long)]
    arrivals: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Abort a cycles run after this many steps.
    #[arg(long, default_value_t = 100_000_000)]
    max_steps: u64,
    /// Hold the action over fictitious steps (real) or resample every step (every).
    #[arg(long, value_enum, default_value = "real")]
    step_mode: ModeArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Real,
    Every,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    model: String,
    /// Checkpoint file, or one of pr, lbfs, fcfs, fcfs-buffer, threshold:T,
    /// priority:i,j,..., uniform.
    #[arg(long)]
    policy: String,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Evaluate exactly on a box with this cap per class instead of simulating.
    #[arg(long)]
    exact_cap: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurveArgs {
    model: String,
    /// Training run directory holding checkpoint-NNNN.json files.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad input (exit 1) or a failure while computing (exit 2).
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<qnppo::Error>() {
            Some(
                qnppo::Error::InvalidNetwork(_)
                | qnppo::Error::SingularRouting(_)
                | qnppo::Error::CheckpointMismatch(_)
                | qnppo::Error::MissingCheckpoint(_)
                | qnppo::Error::Json(_),
            ) => Failure::Invalid(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<qnppo::Error> for Failure {
    fn from(e: qnppo::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(anyhow!(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_workers(cli.workers) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Validate { model, .. } => cmd_validate(&model),
        Command::Fixtures { out, .. } => cmd_fixtures(&out),
        Command::SolveDp(a) => cmd_solve_dp(&a, cli.workers),
        Command::Train(a) => cmd_train(&a, cli.workers),
        Command::Evaluate(a) => cmd_evaluate(&a, cli.workers),
        Command::LearningCurve(a) => cmd_curve(&a, cli.workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("invalid: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(feature = "parallel")]
fn init_workers(n: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_workers(_: Option<usize>) -> anyhow::Result<()> {
    Ok(())
}

/// Loads a model file, falling back to a shipped fixture of that name.
fn load_model(name: &str) -> std::result::Result<ModelFile, Failure> {
    let path = Path::new(name);
    if path.exists() {
        return ModelFile::load(path).with_context(|| format!("reading {name}")).map_err(Failure::from);
    }
    fixtures::all()
        .into_iter()
        .find(|(stem, _)| stem == name)
        .map(|(_, m)| m)
        .ok_or_else(|| invalid(format!("{name} is neither a file nor a fixture name")))
}

fn compile(spec: &ModelFile) -> std::result::Result<Model, Failure> {
    let v = spec.validate();
    if !v.is_empty() {
        let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        return Err(invalid(msg.join("; ")));
    }
    Ok(spec.compile()?)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    model: &'a str,
    model_fingerprint: String,
    config_path: Option<String>,
    seed: u64,
    workers: Option<usize>,
    code_version: &'static str,
    started_at_unix: u64,
    output: Option<String>,
    overrides: serde_json::Value,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", parts.join(", "))
}

fn cmd_validate(name: &str) -> CmdResult {
    let spec = load_model(name)?;
    let violations = spec.validate();
    if !violations.is_empty() {
        for v in &violations {
            println!("violation: {v}");
        }
        return Err(invalid(format!("{} failed validation", spec.name())));
    }
    match &spec {
        ModelFile::Network(net) => {
            let t = solve_traffic(net)?;
            println!("network {}", net.name);
            println!("q = {}", fmt_vec(&t.q));
            println!("rho = {}", fmt_vec(&t.rho));
            println!("B = {:.6}", t.b);
        }
        ModelFile::NModel(n) => {
            let m = spec.compile()?;
            println!("n-model {}", n.name);
            println!("rho = {:.6}", n.rho);
            println!("B = {:.6}", m.uniformization_rate());
        }
    }
    Ok(())
}

fn cmd_fixtures(out: &Path) -> CmdResult {
    ensure_dir(out)?;
    for (stem, m) in fixtures::all() {
        m.save(&out.join(format!("{stem}.json")))?;
    }
    Ok(())
}

fn cmd_solve_dp(a: &SolveDpArgs, workers: Option<usize>) -> CmdResult {
    let spec = load_model(&a.model)?;
    let model = compile(&spec)?;
    let j = model.num_classes();
    let caps = match a.caps.len() {
        1 => vec![a.caps[0]; j],
        n if n == j => a.caps.clone(),
        n => return Err(invalid(format!("{n} caps given for {j} classes"))),
    };
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        let m = Manifest {
            command: "solve-dp",
            model: &a.model,
            model_fingerprint: spec.fingerprint(),
            config_path: None,
            seed: a.seed,
            workers,
            code_version: env!("CARGO_PKG_VERSION"),
            started_at_unix: now_unix(),
            output: Some(dir.display().to_string()),
            overrides: serde_json::json!({ "caps": caps, "tol": a.tol, "sensitivity": !a.no_sensitivity }),
        };
        write_json(&dir.join("manifest.json"), &m)?;
    }
    let bx = TruncationBox::new(caps)?;
    let opts = RviOptions { tol: a.tol, sensitivity: !a.no_sensitivity, ..RviOptions::default() };
    let t = Instant::now();
    let sol = dp::relative_value_iteration(&model, &bx, &opts)?;
    let secs = t.elapsed().as_secs_f64();
    println!("average cost {:.6}", sol.average_cost);
    match sol.sensitivity {
        Some(s) => println!("sensitivity {:.3e}", s),
        None => println!("sensitivity not computed"),
    }
    println!("iterations {} residual span {:.3e} time {:.1}s", sol.iterations, sol.residual_span, secs);
    if let Some(dir) = &a.out {
        let f = std::fs::File::create(dir.join("solution.csv")).context("creating solution.csv")?;
        sol.write_csv(std::io::BufWriter::new(f))?;
        let summary = serde_json::json!({
            "average_cost": sol.average_cost,
            "sensitivity": sol.sensitivity,
            "iterations": sol.iterations,
            "residual_span": sol.residual_span,
            "caps": sol.bx.caps,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        write_json(&dir.join("timings.json"), &serde_json::json!({ "solve_seconds": secs }))?;
    }
    Ok(())
}

fn build_config(a: &TrainArgs) -> std::result::Result<(TrainConfig, serde_json::Value), Failure> {
    let algorithm = a.algorithm.map(|n| Algorithm::from_number(n).expect("range checked by clap"));
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => {
            let base = match a.preset {
                Preset::Full => TrainConfig::full(),
                Preset::Desk => TrainConfig::desk(),
                Preset::DeskExtended => TrainConfig::desk_extended(),
            };
            match algorithm {
                Some(Algorithm::Discounted) => TrainConfig { algorithm: Algorithm::Discounted, ..base },
                _ => base,
            }
        }
    };
    let mut overrides = serde_json::Map::new();
    let mut note = |k: &str, v: serde_json::Value| {
        overrides.insert(k.to_string(), v);
    };
    if let Some(alg) = algorithm {
        cfg.algorithm = alg;
        note("algorithm", alg.number().into());
    }
    if let Some(e) = a.estimator {
        cfg.variant = match e {
            Estimator::Amp => Variant::Amp,
            Estimator::Gae => Variant::Gae,
        };
        note("estimator", format!("{e:?}").to_lowercase().into());
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        note("seed", s.into());
    }
    if let Some(q) = a.actors {
        cfg.actors = q;
        note("actors", q.into());
    }
    if let Some(i) = a.iterations {
        cfg.iterations = i;
        note("iterations", i.into());
    }
    if let Some(n) = a.cycles {
        cfg.cycles = n;
        note("cycles", n.into());
    }
    if let Some(n) = a.horizon {
        cfg.horizon = n;
        note("horizon", n.into());
    }
    if let Some(n) = a.anchored_actors {
        cfg.anchored_actors = n;
        note("anchored_actors", n.into());
    }
    if let Some(init) = a.init {
        cfg.init = match init {
            InitArg::Xavier => Initialization::Xavier,
            InitArg::ClonePr => Initialization::ClonePr { states: a.clone_states },
        };
        note("init", serde_json::to_value(&cfg.init).map_err(anyhow::Error::from)?);
    }
    if a.config.is_none() {
        note("preset", serde_json::to_value(a.preset).map_err(anyhow::Error::from)?);
    }
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok((cfg, serde_json::Value::Object(overrides)))
}

fn cmd_train(a: &TrainArgs, workers: Option<usize>) -> CmdResult {
    let spec = load_model(&a.model)?;
    let model = compile(&spec)?;
    let (cfg, overrides) = build_config(a)?;
    let dir = &a.out;
    ensure_dir(dir)?;
    let m = Manifest {
        command: "train",
        model: &a.model,
        model_fingerprint: spec.fingerprint(),
        config_path: a.config.as_ref().map(|p| p.display().to_string()),
        seed: cfg.seed,
        workers,
        code_version: env!("CARGO_PKG_VERSION"),
        started_at_unix: now_unix(),
        output: Some(dir.display().to_string()),
        overrides,
    };
    write_json(&dir.join("manifest.json"), &m)?;
    write_json(&dir.join("config.json"), &cfg)?;
    spec.save(&dir.join("network.json"))?;

    let t = Instant::now();
    let out = ppo::train(&model, &cfg, None)?;
    let secs = t.elapsed().as_secs_f64();

    let f = std::fs::File::create(dir.join("iterations.csv")).context("creating iterations.csv")?;
    let mut w = csv_writer(f);
    w.write_record(IterationReport::CSV_HEADER).map_err(anyhow::Error::from)?;
    for r in &out.reports {
        w.write_record(r.csv_fields()).map_err(anyhow::Error::from)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    for (i, ck) in out.checkpoint_records(&spec) {
        ck.save(&dir.join(format!("checkpoint-{i:04}.json")))?;
    }
    write_json(
        &dir.join("timings.json"),
        &serde_json::json!({ "train_seconds": secs, "finished_at_unix": now_unix() }),
    )?;
    if let Some(r) = out.reports.last() {
        println!("iteration {} average cost {:.6}", r.iteration, r.avg_cost);
    }
    println!("wrote {} checkpoints to {}", out.checkpoints.len(), dir.display());
    Ok(())
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

enum Target {
    Policy(Policy),
    Fcfs(FcfsOrder),
}

fn parse_target(s: &str, spec: &ModelFile, model: &Model) -> std::result::Result<(String, Target), Failure> {
    let j = model.num_classes();
    let t = match s {
        "pr" => Target::Policy(Policy::ProportionallyRandomized),
        "lbfs" => Target::Policy(Policy::lbfs(j)),
        "uniform" => Target::Policy(Policy::UniformRandom),
        "fcfs" => Target::Fcfs(FcfsOrder::SystemArrival),
        "fcfs-buffer" => Target::Fcfs(FcfsOrder::BufferArrival),
        _ => {
            if let Some(t) = s.strip_prefix("threshold:") {
                let t = t.parse().map_err(|_| invalid(format!("bad threshold in {s}")))?;
                Target::Policy(Policy::Threshold(t))
            } else if let Some(r) = s.strip_prefix("priority:") {
                let ranking: Vec<usize> = r
                    .split(',')
                    .map(|c| c.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| invalid(format!("bad ranking in {s}")))?;
                if ranking.iter().any(|&c| c >= j) {
                    return Err(invalid(format!("ranking {s} names a missing class")));
                }
                Target::Policy(Policy::StaticPriority(ranking))
            } else if Path::new(s).exists() {
                let path = Path::new(s);
                let net = Checkpoint::load(path)?.policy_for(spec)?;
                let label = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                return Ok((label, Target::Policy(Policy::Neural(net))));
            } else {
                return Err(invalid(format!("unknown policy {s}")));
            }
        }
    };
    match (&t, model) {
        (Target::Policy(Policy::Threshold(_)), Model::Network(_)) => {
            Err(invalid("threshold policies apply to the N-model only"))
        }
        (Target::Fcfs(_), Model::NModel(_)) => Err(invalid("FCFS applies to networks only")),
        _ => Ok((s.to_string(), t)),
    }
}

fn plan_from(b: &BudgetArgs) -> std::result::Result<EvalPlan, Failure> {
    let budget = match (b.cycles, b.arrivals) {
        (Some(m), None) => EvalBudget::Cycles(m),
        (None, Some(a)) => EvalBudget::Arrivals(a),
        _ => return Err(invalid("give exactly one of --cycles or --arrivals")),
    };
    let mut plan = EvalPlan::new(budget, b.seed);
    plan.max_steps = b.max_steps;
    plan.mode = match b.step_mode {
        ModeArg::Real => StepMode::RealTransitionsOnly,
        ModeArg::Every => StepMode::EveryTransition,
    };
    Ok(plan)
}

fn write_estimates(out: Option<&Path>, rows: &[(String, PerfEstimate)]) -> anyhow::Result<()> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv_writer(sink);
    let mut header = vec!["policy"];
    header.extend(PerfEstimate::CSV_HEADER);
    w.write_record(header)?;
    for (name, e) in rows {
        let mut row = vec![name.clone()];
        row.extend(e.csv_fields());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, _workers: Option<usize>) -> CmdResult {
    let spec = load_model(&a.model)?;
    let model = compile(&spec)?;
    let (name, target) = parse_target(&a.policy, &spec, &model)?;
    if let Some(cap) = a.exact_cap {
        let Target::Policy(p) = target else {
            return Err(invalid("FCFS has no exact evaluation"));
        };
        let bx = TruncationBox::uniform(model.num_classes(), cap)?;
        let e = dp::evaluate_policy_exact(&model, &p, &bx)?;
        let sink: Box<dyn Write> = match &a.out {
            Some(p) => Box::new(std::fs::File::create(p).context("creating output")?),
            None => Box::new(std::io::stdout()),
        };
        let mut w = csv_writer(sink);
        w.write_record(["policy", "cap", "average_cost", "residual"]).map_err(anyhow::Error::from)?;
        w.write_record([name, cap.to_string(), format!("{}", e.average_cost), format!("{:e}", e.residual)])
            .map_err(anyhow::Error::from)?;
        w.flush().map_err(anyhow::Error::from)?;
        return Ok(());
    }
    let plan = plan_from(&a.budget)?;
    let est = match target {
        Target::Policy(p) => evaluation::evaluate_policy(&model, &p, &plan)?,
        Target::Fcfs(order) => {
            let net = model.as_network().expect("checked in parse_target");
            evaluation::evaluate_fcfs(net, order, &plan)?
        }
    };
    write_estimates(a.out.as_deref(), &[(name, est)])?;
    Ok(())
}

fn cmd_curve(a: &CurveArgs, _workers: Option<usize>) -> CmdResult {
    let spec = load_model(&a.model)?;
    let model = compile(&spec)?;
    let plan = plan_from(&a.budget)?;
    let rows = evaluation::learning_curve(&a.run, &spec, &model, &plan)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("curve.csv"));
    let f = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    evaluation::write_curve_csv(&rows, std::io::BufWriter::new(f))?;
    for r in &rows {
        println!("{} {:.6} ± {:.6}", r.iteration, r.estimate.mean, r.estimate.half_width);
    }
    Ok(())
}
