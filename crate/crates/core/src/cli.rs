//! The `fpc` command line: dataset generation, closed-loop simulation and
//! offline fusion replay.
//!
//! Settings resolve as flag, then environment, then config file, then the
//! built-in default. Exit codes: 0 success, 1 runtime failure, 2 usage,
//! configuration or input schema error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::action::{PredictionBuffer, PredictionChunk};
use crate::backends::{
    build_supervisor, BackendConfig, BackendKind, HttpSupervisor, OfflineSupervisor, SUPERVISOR_URL_ENV,
};
use crate::codec::Thresholds;
use crate::dataset::{generate_all, read_episodes, write_episodes, write_records, GenerationConfig};
use crate::error::DatasetError;
use crate::fusion::{fuse, FusionParams, FusionResult};
use crate::runtime::Supervisor;
use crate::sim::{derive_seeds, evaluate_with, Disturbance, DisturbanceMode, Evaluation, Scenario, VariantMetrics};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config or malformed input.
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(m: impl std::fmt::Display) -> CliError {
    CliError::Usage(m.to_string())
}

fn runtime(m: impl std::fmt::Display) -> CliError {
    CliError::Runtime(m.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub delta_g: f64,
    pub window: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        DatasetSection {
            input: None,
            out: None,
            delta_g: g.delta_g,
            window: g.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub episodes: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub supervisors: Vec<BackendKind>,
    /// Also run every variant without disturbance.
    pub baseline: bool,
    pub report: Option<PathBuf>,
    /// Episode JSONL export of every executed trace.
    pub traces: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            episodes: 100,
            seed: 0,
            jobs: 0,
            supervisors: vec![BackendKind::Oracle, BackendKind::None],
            baseline: false,
            report: None,
            traces: None,
            format: OutputFormat::Text,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Defaults to the first chunk's length.
    pub horizon: Option<usize>,
}

/// Everything a run can be configured with, as read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fusion: FusionParams,
    pub thresholds: Thresholds,
    pub dataset: DatasetSection,
    pub scenario: Scenario,
    pub backend: BackendConfig,
    pub simulate: SimulateSection,
    pub replay: ReplaySection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[derive(Debug, Parser)]
#[command(name = "fpc", version, about = "Chunked action fusion with keyframe supervision")]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn demonstration episodes into supervisor QA records
    GenDataset(GenArgs),
    /// Run closed-loop episodes with and without a supervisor
    Simulate(Box<SimArgs>),
    /// Fuse a logged sequence of action chunks offline
    FuseReplay(ReplayArgs),
}

#[derive(Debug, Args)]
struct FusionArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// History depth
    #[arg(long)]
    n: Option<usize>,
}

impl FusionArgs {
    fn apply(&self, p: &mut FusionParams) {
        set(&mut p.alpha, self.alpha);
        set(&mut p.lambda, self.lambda);
        set(&mut p.beta, self.beta);
        set(&mut p.epsilon, self.epsilon);
        set(&mut p.n, self.n);
    }
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    #[arg(long)]
    delta_small: Option<f64>,
    #[arg(long)]
    delta_large: Option<f64>,
    #[arg(long)]
    step_small: Option<f64>,
    #[arg(long)]
    step_large: Option<f64>,
}

impl ThresholdArgs {
    fn apply(&self, t: &mut Thresholds) {
        set(&mut t.small, self.delta_small);
        set(&mut t.large, self.delta_large);
        set(&mut t.step_small, self.step_small);
        set(&mut t.step_large, self.step_large);
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Episode JSONL
    #[arg(long)]
    input: Option<PathBuf>,
    /// QA record JSONL to write
    #[arg(long, visible_alias = "output")]
    out: Option<PathBuf>,
    #[arg(long)]
    delta_g: Option<f64>,
    /// Frames retained before each gripper change
    #[arg(long)]
    window: Option<u64>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated variants: none, oracle, scripted, http
    #[arg(long, value_delimiter = ',')]
    supervisor: Option<Vec<BackendKind>>,
    #[arg(long, value_name = "none|keyframe|perstep")]
    noise_mode: Option<DisturbanceMode>,
    /// Disturbance amplitude range LO:HI in meters
    #[arg(long, value_name = "LO:HI", value_parser = parse_range)]
    noise: Option<[f64; 2]>,
    #[arg(long)]
    grasp_tolerance: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Also run every variant undisturbed and report degradation
    #[arg(long)]
    baseline: bool,
    /// JSON report path
    #[arg(long)]
    report: Option<PathBuf>,
    /// Episode JSONL export of executed traces
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Scripted supervisor replies, one per line
    #[arg(long, value_name = "FILE")]
    script: Option<PathBuf>,
    /// HTTP supervisor base URL
    #[arg(long, env = SUPERVISOR_URL_ENV)]
    endpoint: Option<String>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    retries: Option<u32>,
    #[command(flatten)]
    fusion: FusionArgs,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Chunk log JSONL: {"issued_at": t, "actions": [[7 numbers], ...]}
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output JSONL (stdout if omitted)
    #[arg(long, visible_alias = "output")]
    out: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[command(flatten)]
    fusion: FusionArgs,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([parse(lo)?, parse(hi)?])
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenDataset(args) => gen_dataset(cfg, args),
        Command::Simulate(args) => simulate(cfg, *args),
        Command::FuseReplay(args) => fuse_replay(cfg, args),
    }
}

fn gen_dataset(mut cfg: RunConfig, args: GenArgs) -> Result<(), CliError> {
    let d = &mut cfg.dataset;
    set(&mut d.input, args.input.map(Some));
    set(&mut d.out, args.out.map(Some));
    set(&mut d.delta_g, args.delta_g);
    set(&mut d.window, args.window);
    args.thresholds.apply(&mut cfg.thresholds);

    let input = d.input.clone().ok_or_else(|| usage("gen-dataset needs --input"))?;
    let out = d.out.clone().ok_or_else(|| usage("gen-dataset needs --out"))?;
    cfg.thresholds.validate().map_err(usage)?;
    if !(d.delta_g > 0.0 && d.delta_g < 1.0) {
        return Err(usage(format!("delta_g must lie in (0, 1), got {}", d.delta_g)));
    }
    let gen = GenerationConfig {
        delta_g: d.delta_g,
        window: d.window,
        thresholds: cfg.thresholds,
    };

    let episodes = read_episodes(&input).map_err(usage)?;
    let (records, report) = generate_all(&episodes, &gen).map_err(|e| match e {
        DatasetError::Io { .. } => runtime(e),
        _ => usage(e),
    })?;
    write_records(&records, &out).map_err(runtime)?;
    println!("{}", serde_json::to_string(&report).map_err(runtime)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedComparison {
    pub variant: String,
    pub reference: String,
    pub task_rate_gain: f64,
    pub grasp_rate_gain: f64,
    /// Seeds the reference failed and the variant solved.
    pub rescued: usize,
    /// Seeds the reference solved and the variant failed.
    pub lost: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Degradation {
    pub variant: String,
    pub baseline_task_rate: f64,
    pub disturbed_task_rate: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub seed: u64,
    pub episodes: usize,
    pub disturbance: Disturbance,
    pub variants: Vec<VariantMetrics>,
    pub paired: Vec<PairedComparison>,
    pub baseline: Option<Vec<VariantMetrics>>,
    pub degradation: Vec<Degradation>,
    pub backend_unreachable: bool,
    pub warnings: Vec<String>,
    pub fusion: FusionParams,
    pub thresholds: Thresholds,
    pub scenario: Scenario,
}

fn paired(eval: &Evaluation, reference: usize) -> Vec<PairedComparison> {
    let rows = &eval.table.rows;
    let base = &eval.results[reference];
    (0..rows.len())
        .filter(|&i| i != reference)
        .map(|i| {
            let pairs = || eval.results[i].iter().zip(base);
            PairedComparison {
                variant: rows[i].variant.clone(),
                reference: rows[reference].variant.clone(),
                task_rate_gain: rows[i].task_rate - rows[reference].task_rate,
                grasp_rate_gain: rows[i].grasp_rate - rows[reference].grasp_rate,
                rescued: pairs().filter(|(v, r)| v.task_success && !r.task_success).count(),
                lost: pairs().filter(|(v, r)| !v.task_success && r.task_success).count(),
            }
        })
        .collect()
}

fn read_script(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn simulate(mut cfg: RunConfig, args: SimArgs) -> Result<(), CliError> {
    let s = &mut cfg.simulate;
    set(&mut s.episodes, args.episodes);
    set(&mut s.seed, args.seed);
    set(&mut s.jobs, args.jobs);
    set(&mut s.supervisors, args.supervisor);
    s.baseline |= args.baseline;
    set(&mut s.report, args.report.map(Some));
    set(&mut s.traces, args.traces.map(Some));
    set(&mut s.format, args.format);
    let sc = &mut cfg.scenario;
    set(&mut sc.disturbance.mode, args.noise_mode);
    set(&mut sc.disturbance.amplitude, args.noise);
    set(&mut sc.grasp_tolerance, args.grasp_tolerance);
    set(&mut sc.max_steps, args.max_steps);
    let b = &mut cfg.backend;
    if let Some(path) = &args.script {
        b.script = read_script(path)?;
    }
    if let Some(e) = args.endpoint {
        b.endpoint = Some(e);
    }
    set(&mut b.timeout_ms, args.timeout_ms);
    set(&mut b.retries, args.retries);
    args.fusion.apply(&mut cfg.fusion);
    args.thresholds.apply(&mut cfg.thresholds);

    let s = &cfg.simulate;
    if s.episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    if s.supervisors.is_empty() {
        return Err(usage("need at least one --supervisor variant"));
    }
    for (i, k) in s.supervisors.iter().enumerate() {
        if s.supervisors[..i].contains(k) {
            return Err(usage(format!("supervisor variant {k} listed twice")));
        }
    }
    cfg.scenario.validate().map_err(usage)?;
    cfg.fusion.validate(cfg.scenario.horizon).map_err(usage)?;
    cfg.thresholds.validate().map_err(usage)?;
    let backends: Vec<BackendConfig> = s
        .supervisors
        .iter()
        .map(|&kind| BackendConfig {
            kind,
            ..cfg.backend.clone()
        })
        .collect();
    for b in &backends {
        b.validate().map_err(|e| usage(format!("{}: {e}", b.kind)))?;
    }

    let mut warnings = Vec::new();
    let mut offline = vec![false; backends.len()];
    for (i, b) in backends.iter().enumerate().filter(|(_, b)| b.kind == BackendKind::Http) {
        let reachable = HttpSupervisor::from_config(b).and_then(|h| h.probe());
        if let Err(e) = reachable {
            let msg = format!(
                "http supervisor at {} unreachable ({e}); running fail-open",
                b.endpoint.as_deref().unwrap_or_default()
            );
            eprintln!("warning: {msg}");
            warnings.push(msg);
            offline[i] = true;
        }
    }

    let names: Vec<String> = backends.iter().map(|b| b.kind.to_string()).collect();
    let seeds = derive_seeds(s.seed, s.episodes);
    let jobs = if s.jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        s.jobs
    };
    let oracle = cfg.scenario.oracle_spec();
    let thresholds = cfg.thresholds;
    let make = |i: usize| -> Result<Option<Box<dyn Supervisor + Send>>, _> {
        if offline[i] {
            return Ok(Some(Box::new(OfflineSupervisor)));
        }
        build_supervisor(&backends[i], oracle, thresholds)
    };
    let run = |scenario: &Scenario| {
        evaluate_with(scenario, &seeds, &names, &cfg.fusion, &thresholds, jobs, make).map_err(runtime)
    };

    let disturbed = run(&cfg.scenario)?;
    let baseline = if s.baseline {
        let clean = Scenario {
            disturbance: Disturbance {
                mode: DisturbanceMode::None,
                ..cfg.scenario.disturbance
            },
            ..cfg.scenario.clone()
        };
        Some(run(&clean)?)
    } else {
        None
    };

    let reference = s.supervisors.iter().position(|k| *k == BackendKind::None);
    let degradation = baseline
        .as_ref()
        .map(|b| {
            b.table
                .rows
                .iter()
                .zip(&disturbed.table.rows)
                .map(|(clean, noisy)| Degradation {
                    variant: noisy.variant.clone(),
                    baseline_task_rate: clean.task_rate,
                    disturbed_task_rate: noisy.task_rate,
                    drop: clean.task_rate - noisy.task_rate,
                })
                .collect()
        })
        .unwrap_or_default();
    let report = SimulateReport {
        seed: s.seed,
        episodes: s.episodes,
        disturbance: cfg.scenario.disturbance,
        variants: disturbed.table.rows.clone(),
        paired: reference.map(|r| paired(&disturbed, r)).unwrap_or_default(),
        baseline: baseline.as_ref().map(|b| b.table.rows.clone()),
        degradation,
        backend_unreachable: offline.iter().any(|&o| o),
        warnings,
        fusion: cfg.fusion,
        thresholds: cfg.thresholds,
        scenario: cfg.scenario.clone(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;

    if let Some(path) = &s.traces {
        let instruction = &cfg.scenario.instruction;
        let episodes: Vec<_> = names
            .iter()
            .zip(&disturbed.results)
            .flat_map(|(name, results)| {
                results
                    .iter()
                    .enumerate()
                    .map(move |(i, r)| r.to_episode(&format!("{name}-{i:04}"), instruction))
            })
            .collect();
        write_episodes(&episodes, path).map_err(runtime)?;
    }
    if let Some(path) = &s.report {
        std::fs::write(path, format!("{json}\n")).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    match s.format {
        OutputFormat::Json => println!("{json}"),
        OutputFormat::Text => print!("{}", render_text(&report, &disturbed, baseline.as_ref())),
    }
    Ok(())
}

fn render_text(report: &SimulateReport, disturbed: &Evaluation, baseline: Option<&Evaluation>) -> String {
    let mut out = format!(
        "seed {}  episodes {}  disturbance {:?} [{}, {}]\n",
        report.seed,
        report.episodes,
        report.disturbance.mode,
        report.disturbance.amplitude[0],
        report.disturbance.amplitude[1]
    );
    out.push_str(&disturbed.table.to_text());
    for p in &report.paired {
        out.push_str(&format!(
            "{} vs {}: task {:+.1} pts, grasp {:+.1} pts, rescued {}, lost {}\n",
            p.variant,
            p.reference,
            100.0 * p.task_rate_gain,
            100.0 * p.grasp_rate_gain,
            p.rescued,
            p.lost
        ));
    }
    if let Some(b) = baseline {
        out.push_str("\nundisturbed baseline\n");
        out.push_str(&b.table.to_text());
        for d in &report.degradation {
            out.push_str(&format!("{}: task rate drop {:.1} pts\n", d.variant, 100.0 * d.drop));
        }
    }
    for w in &report.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChunkLine {
    issued_at: u64,
    actions: Vec<crate::action::ActionVector>,
}

#[derive(Debug, Serialize)]
struct ReplayLine {
    t: u64,
    #[serde(flatten)]
    result: FusionResult,
    count: usize,
}

fn read_chunks(path: &Path) -> Result<Vec<(usize, PredictionChunk)>, CliError> {
    let file = File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut chunks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| usage(format!("{}:{}: {e}", path.display(), i + 1));
        let raw: ChunkLine = serde_json::from_str(&line).map_err(|e| at(&e))?;
        let chunk = PredictionChunk::new(raw.issued_at, raw.actions).map_err(|e| at(&e))?;
        chunks.push((i + 1, chunk));
    }
    Ok(chunks)
}

fn fuse_replay(mut cfg: RunConfig, args: ReplayArgs) -> Result<(), CliError> {
    let r = &mut cfg.replay;
    set(&mut r.input, args.input.map(Some));
    set(&mut r.out, args.out.map(Some));
    set(&mut r.horizon, args.horizon.map(Some));
    args.fusion.apply(&mut cfg.fusion);

    let input = r.input.clone().ok_or_else(|| usage("fuse-replay needs --input"))?;
    if let Some(h) = r.horizon {
        cfg.fusion.validate(h).map_err(usage)?;
    }
    let chunks = read_chunks(&input)?;
    let Some(horizon) = r.horizon.or_else(|| chunks.first().map(|(_, c)| c.horizon())) else {
        return Err(usage(format!("{}: no chunks", input.display())));
    };
    cfg.fusion.validate(horizon).map_err(usage)?;

    let mut buffer = PredictionBuffer::new(cfg.fusion.n, horizon).map_err(usage)?;
    let mut lines = Vec::with_capacity(chunks.len());
    for (line, chunk) in chunks {
        let t = chunk.issued_at;
        let at = |e: &dyn std::fmt::Display| usage(format!("{}:{line}: timestep {t}: {e}", input.display()));
        buffer.push_chunk(chunk).map_err(|e| at(&e))?;
        let aligned = buffer.aligned_predictions(t, cfg.fusion.n).map_err(|e| at(&e))?;
        let result = fuse(&aligned.actions, &cfg.fusion).map_err(|e| at(&e))?;
        lines.push(ReplayLine {
            t,
            result,
            count: aligned.count(),
        });
    }

    let sink: Box<dyn Write> = match &r.out {
        Some(path) => Box::new(File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut sink = BufWriter::new(sink);
    for l in &lines {
        serde_json::to_writer(&mut sink, l).map_err(runtime)?;
        sink.write_all(b"\n").map_err(runtime)?;
    }
    sink.flush().map_err(runtime)?;
    Ok(())
}
