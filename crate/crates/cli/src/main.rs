use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tilewave::eval::{
    evaluate, generate_queries, profiled_points, two_regime_landscape, EvalContext, QuerySpec,
};
use tilewave::kernel::parse_workloads;
use tilewave::profile::{check_waves, load_records, save_records};
use tilewave::sim::{write_sweep_csv, SimExperiment};
use tilewave::{
    build_dual_tables, build_plan, load_tables, run_profile, save_tables, tune, BaselinePredictor,
    BlockLatency, ConfigRegistry, CsvReplayBackend, Error, ExternalCommandBackend, HardwareSpec,
    KernelFamily, KernelWorkload, MeasurementBackend, PlanParams, SamplingPlan, SimMachine,
    SimulatorBackend, SyntheticGround,
};

#[derive(Parser)]
#[command(
    name = "tilewave",
    version,
    about = "Wave-aware latency modeling and config selection for tiled GPU kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sampling plan of grid points and loop anchors.
    Plan(PlanArgs),
    /// Measure every plan point under every feasible config.
    Profile(ProfileArgs),
    /// Fit dual tables from a profile dataset.
    Fit(FitArgs),
    /// Pick a config for one or more workloads.
    Tune(TuneArgs),
    /// Sweep simulated latency over a range of grid sizes.
    Simulate(SimulateArgs),
    /// Compare tuned, baseline, oracle and default configs on the simulator.
    Eval(EvalArgs),
    /// Write the built-in two-regime registry and ground truth.
    Landscape(LandscapeArgs),
}

#[derive(Args)]
struct HwArgs {
    /// Streaming multiprocessors.
    #[arg(long = "n-sm", default_value_t = 132)]
    n_sm: u64,
    /// Resident blocks per SM.
    #[arg(long = "blocks-per-sm", default_value_t = 1)]
    blocks_per_sm: u64,
}

impl HwArgs {
    fn spec(&self) -> HardwareSpec {
        HardwareSpec::new(format!("sim-{}", self.n_sm), self.n_sm)
            .with_blocks_per_sm(self.blocks_per_sm)
    }
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_parser = parse_family)]
    family: KernelFamily,
    /// Profiled wave horizon.
    #[arg(long = "W", default_value_t = 40)]
    waves: u64,
    /// Sub-intervals per wave.
    #[arg(long = "I", default_value_t = 4)]
    intervals: u64,
    /// Upper bound on the grid aspect ratio n_g / m_g.
    #[arg(long, default_value_t = 1.1)]
    tau: f64,
    #[command(flatten)]
    hw: HwArgs,
    /// Comma-separated loop anchors.
    #[arg(long, value_delimiter = ',', required = true)]
    anchors: Vec<u64>,
    /// Attention heads (attention plans only).
    #[arg(long = "n-heads")]
    n_heads: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    /// Discrete-event simulator over a synthetic ground truth.
    Sim,
    /// Replay latencies from an existing profile CSV.
    Replay,
    /// Run an external command per measurement.
    Command,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendKind,
    /// Ground-truth table (sim backend).
    #[arg(long)]
    ground: Option<PathBuf>,
    /// Block latency standard deviation in µs (sim backend).
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measured repetitions per point (sim backend).
    #[arg(long, default_value_t = 5)]
    reps: u32,
    /// Dataset to replay (replay backend).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Executable to run (command backend); extra arguments follow `--`.
    #[arg(long = "exec")]
    exec: Option<PathBuf>,
    #[arg(last = true)]
    exec_args: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Profile CSV.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    /// Plan the dataset was profiled from; supplies hardware and W.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Profiled wave horizon, when no plan is given.
    #[arg(long = "W")]
    waves: Option<u64>,
    #[command(flatten)]
    hw: HwArgs,
    /// Extrapolation window in waves.
    #[arg(long, default_value_t = 10)]
    p: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    /// One workload, e.g. "dense_gemm 4096 4096 1024".
    #[arg(long, conflicts_with = "workloads")]
    workload: Option<String>,
    /// File with one workload per line.
    #[arg(long)]
    workloads: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON experiment file; replaces the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Grid range as lo..hi (inclusive).
    #[arg(long, value_parser = parse_range, default_value = "1..660")]
    g: (u64, u64),
    /// Constant mean block latency in µs.
    #[arg(long, default_value_t = 50.0)]
    mu: f64,
    /// Loop count passed to the block model.
    #[arg(long, default_value_t = 1)]
    l: u64,
    #[command(flatten)]
    hw: HwArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    reps: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    ground: PathBuf,
    /// Training profile CSV, used to fit the baselines.
    #[arg(long)]
    dataset: PathBuf,
    /// Plan of the training data; its grid points are excluded from queries.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Query file; when absent, queries are drawn at random.
    #[arg(long)]
    workloads: Option<PathBuf>,
    /// Number of random queries.
    #[arg(long, default_value_t = 200)]
    queries: usize,
    /// Wave range of random queries under the default macro, as lo..hi.
    #[arg(long, value_parser = parse_range, default_value = "1..10")]
    waves: (u64, u64),
    /// Reduction-dimension range of random queries, as lo..hi.
    #[arg(long, value_parser = parse_range, default_value = "128..4096")]
    k: (u64, u64),
    #[arg(long, default_value_t = 5.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    reps: u32,
    /// Per-query CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LandscapeArgs {
    /// Directory for registry.json and ground.json.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

fn parse_family(s: &str) -> Result<KernelFamily, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected lo..hi, got `{s}`"))?;
    let lo: u64 = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: u64 = hi
        .trim()
        .trim_start_matches('=')
        .parse()
        .map_err(|e| format!("bad upper bound: {e}"))?;
    if lo > hi {
        return Err(format!("empty range `{s}`"));
    }
    Ok((lo, hi))
}

type CliResult<T = ()> = Result<T, String>;

fn fail(e: Error) -> String {
    e.to_string()
}

/// Writes to `path`, or to stdout when absent.
fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| format!("{}: {e}", p.display())),
        None => io::stdout().write_all(bytes).map_err(|e| e.to_string()),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_plan(a: PlanArgs) -> CliResult {
    let hw = a.hw.spec();
    let plan = build_plan(
        &hw,
        a.family,
        &PlanParams {
            waves: a.waves,
            intervals: a.intervals,
            tau: a.tau,
            loop_anchors: a.anchors,
            n_heads: a.n_heads,
        },
    )
    .map_err(fail)?;
    eprintln!(
        "{} grid points, {} loop anchors",
        plan.grid_points.len(),
        plan.loop_anchors.len()
    );
    emit(
        a.out.as_deref(),
        (plan.to_json().map_err(fail)? + "\n").as_bytes(),
    )
}

fn cmd_profile(a: ProfileArgs) -> CliResult {
    let plan = SamplingPlan::load(&a.plan).map_err(fail)?;
    let registry = ConfigRegistry::load(&a.registry).map_err(fail)?;
    let backend: Box<dyn MeasurementBackend> = match a.backend {
        BackendKind::Sim => {
            let path = a
                .ground
                .as_ref()
                .ok_or("--ground is required with --backend sim")?;
            let ground = SyntheticGround::load(path).map_err(fail)?;
            ground.check_covers(&registry).map_err(fail)?;
            if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
                return Err("--sigma must be a finite non-negative number".into());
            }
            let machine = SimMachine::new(plan.hardware.clone(), a.seed);
            Box::new(SimulatorBackend::new(machine, ground, a.sigma).with_iterations(3, a.reps))
        }
        BackendKind::Replay => {
            let path = a
                .dataset
                .as_ref()
                .ok_or("--dataset is required with --backend replay")?;
            Box::new(CsvReplayBackend::load(path).map_err(fail)?)
        }
        BackendKind::Command => {
            let exec = a.exec.ok_or("--exec is required with --backend command")?;
            Box::new(ExternalCommandBackend::new(exec).with_args(a.exec_args))
        }
    };
    let records = run_profile(&plan, &registry, backend.as_ref()).map_err(fail)?;
    eprintln!("{} records", records.len());
    match &a.out {
        Some(p) => save_records(&records, p).map_err(fail),
        None => tilewave::profile::write_records(&records, io::stdout()).map_err(fail),
    }
}

fn cmd_fit(a: FitArgs) -> CliResult {
    let records = load_records(&a.dataset).map_err(fail)?;
    let registry = ConfigRegistry::load(&a.registry).map_err(fail)?;
    let (hw, waves) = match &a.plan {
        Some(p) => {
            let plan = SamplingPlan::load(p).map_err(fail)?;
            (plan.hardware.clone(), a.waves.unwrap_or(plan.waves))
        }
        None => {
            let waves = a.waves.ok_or("either --plan or --W is required")?;
            (a.hw.spec(), waves)
        }
    };
    hw.validate().map_err(fail)?;
    check_waves(&records, &hw).map_err(fail)?;
    let set = build_dual_tables(&records, &registry, &hw, waves, a.p).map_err(fail)?;
    for t in &set.tables {
        let min_r2 = t
            .diagnostics
            .buckets
            .values()
            .map(|d| d.r2)
            .fold(f64::INFINITY, f64::min);
        let flagged = t
            .diagnostics
            .buckets
            .values()
            .filter(|d| !d.flags.is_empty())
            .count();
        eprintln!(
            "macro {}: {} buckets, min R^2 {:.6}, {} flagged; extrapolation R^2 {:.6}",
            t.macro_id,
            t.coeffs.len(),
            min_r2,
            flagged,
            t.diagnostics.extrapolation.r2
        );
    }
    match &a.out {
        Some(p) => save_tables(&set, p).map_err(fail),
        None => emit(None, (set.to_json().map_err(fail)? + "\n").as_bytes()),
    }
}

fn load_checked_tables(
    tables: &Path,
    registry: &Path,
) -> CliResult<(tilewave::TableSet, ConfigRegistry)> {
    let set = load_tables(tables).map_err(fail)?;
    let registry = ConfigRegistry::load(registry).map_err(fail)?;
    set.check_against(&registry).map_err(fail)?;
    Ok((set, registry))
}

fn read_workloads(path: &Path) -> CliResult<Vec<KernelWorkload>> {
    let text = read_text(path)?;
    parse_workloads(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_tune(a: TuneArgs) -> CliResult {
    let (set, registry) = load_checked_tables(&a.tables, &a.registry)?;
    let workloads = match (&a.workload, &a.workloads) {
        (Some(w), _) => vec![w.parse::<KernelWorkload>().map_err(fail)?],
        (None, Some(p)) => read_workloads(p)?,
        (None, None) => return Err("one of --workload or --workloads is required".into()),
    };
    let mut out = String::from(
        "workload,macro_id,micro_id,predicted_us,regime,g,l,anchor,model_evals,anchor_comparisons,fallbacks\n",
    );
    for x in &workloads {
        let t = tune(x, &set, &registry).map_err(|e| format!("{x}: {e}"))?;
        let d = t.decision_stats;
        out += &format!(
            "{x},{},{},{},{},{},{},{},{},{},{}\n",
            t.macro_id,
            t.micro_id,
            t.predicted_latency_us,
            t.regime,
            t.g,
            t.l,
            t.anchor,
            d.model_evals,
            d.anchor_comparisons,
            d.fallbacks
        );
    }
    emit(a.out.as_deref(), out.as_bytes())
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let exp = match &a.config {
        Some(p) => {
            SimExperiment::from_json(&read_text(p)?).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => {
            let exp = SimExperiment {
                n_sm: a.hw.n_sm,
                blocks_per_sm: a.hw.blocks_per_sm,
                mu: Some(a.mu),
                ground: None::<BlockLatency>,
                sigma: a.sigma,
                seed: a.seed,
                g_range: [a.g.0, a.g.1],
                l: a.l,
                repetitions: a.reps,
            };
            exp.validate().map_err(fail)?;
            exp
        }
    };
    let rows = exp.run();
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).map_err(fail)?;
    emit(a.out.as_deref(), &buf)
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (set, registry) = load_checked_tables(&a.tables, &a.registry)?;
    let ground = SyntheticGround::load(&a.ground).map_err(fail)?;
    ground.check_covers(&registry).map_err(fail)?;
    let records = load_records(&a.dataset).map_err(fail)?;
    let step = BaselinePredictor::fit_step(&records).map_err(fail)?;
    let linear = BaselinePredictor::fit_global_linear(&records).map_err(fail)?;
    let queries = match &a.workloads {
        Some(p) => read_workloads(p)?,
        None => {
            let exclude = match &a.plan {
                Some(p) => profiled_points(&SamplingPlan::load(p).map_err(fail)?),
                None => records.iter().map(|r| (r.g, r.l)).collect(),
            };
            let spec = QuerySpec {
                count: a.queries,
                seed: a.seed,
                waves: a.waves,
                k: a.k,
            };
            let (reference, _) = registry.default_pair();
            generate_queries(&spec, &registry, reference, &set.hardware, &exclude).map_err(fail)?
        }
    };
    let machine = SimMachine::new(set.hardware.clone(), a.seed);
    let ctx = EvalContext {
        tables: &set,
        registry: &registry,
        step: &step,
        linear: &linear,
        machine: &machine,
        ground: &ground,
        sigma_us: a.sigma,
        reps: a.reps,
    };
    let report = evaluate(&queries, &ctx).map_err(fail)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(fail)?;
    match &a.out {
        Some(p) => {
            emit(Some(p), &buf)?;
            print!("{}", report.summary_text());
            Ok(())
        }
        None => {
            emit(None, &buf)?;
            eprint!("{}", report.summary_text());
            Ok(())
        }
    }
}

fn cmd_landscape(a: LandscapeArgs) -> CliResult {
    let l = two_regime_landscape();
    fs::create_dir_all(&a.out_dir).map_err(|e| format!("{}: {e}", a.out_dir.display()))?;
    l.registry
        .save(a.out_dir.join("registry.json"))
        .map_err(fail)?;
    l.ground.save(a.out_dir.join("ground.json")).map_err(fail)?;
    eprintln!(
        "{} macros, {} micros, {} feasible pairs on {} SMs",
        l.registry.macros().len(),
        l.registry.micros().len(),
        l.registry.feasible_count(),
        l.hardware.n_sm
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Landscape(a) => cmd_landscape(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
