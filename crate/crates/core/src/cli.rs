//! The `espsim` command line: scenario loading, planning, simulation sweeps
//! and cost comparison.
//!
//! Exit codes are 0 on success, 1 on any input problem and 2 when a
//! simulated run faults or deadlocks. Errors are reported on stderr as a
//! single JSON object `{"error": kind, "message": text}`.

use crate::cluster::{
    baseline_allocation, build_allocation_with_sources, pack, ClusterConfig, NodeSpec, ReconfigRequest,
    ResizeMethod, Strategy,
};
use crate::cost::{
    best_method_matrix, cost_expand, cost_shrink, CostError, CostParams, CostReport, Method, MethodMatrix,
};
use crate::planner::{plan, SpawnSchedule};
use crate::sim::{simulate_full_with, SimError, SimOptions, SimOutcome, SimTrace};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Parse,
    Io,
    Validation,
    Protocol,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Parse => "parse",
            Self::Io => "io",
            Self::Validation => "validation",
            Self::Protocol => "protocol",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    #[serde(rename = "error")]
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Protocol => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error object serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<SimError> for CliError {
    fn from(err: SimError) -> Self {
        let kind = if err.is_protocol() { ErrorKind::Protocol } else { ErrorKind::Validation };
        Self::new(kind, err.to_string())
    }
}

impl From<CostError> for CliError {
    fn from(err: CostError) -> Self {
        let kind = match err {
            CostError::Io { .. } => ErrorKind::Io,
            CostError::Parse(_) => ErrorKind::Parse,
            _ => ErrorKind::Validation,
        };
        Self::new(kind, err.to_string())
    }
}

fn io_error(path: &Path, err: std::io::Error) -> CliError {
    CliError::new(ErrorKind::Io, format!("{}: {err}", path.display()))
}

fn validation(err: impl fmt::Display) -> CliError {
    CliError::new(ErrorKind::Validation, err.to_string())
}

/// The cluster in a scenario file: a list of core counts, a list of named
/// nodes, or a uniform `{count, cores}` block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodesSpec {
    Cores(Vec<u32>),
    Named(Vec<NodeSpec>),
    Uniform { count: usize, cores: u32 },
}

impl NodesSpec {
    pub fn to_cluster(&self) -> ClusterConfig {
        match self {
            Self::Cores(cores) => ClusterConfig::from_cores(cores),
            Self::Named(nodes) => ClusterConfig { nodes: nodes.clone() },
            Self::Uniform { count, cores } => ClusterConfig::homogeneous(*count, *cores),
        }
    }
}

fn default_strategy() -> Strategy {
    Strategy::IterativeDiffusive
}

fn default_method() -> ResizeMethod {
    ResizeMethod::Merge
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub nodes: NodesSpec,
    pub ns: u64,
    pub nt: u64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_method")]
    pub method: ResizeMethod,
    /// Explicit source layout; sources are packed onto the first nodes
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<u32>>,
    /// Cost parameter file, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub cluster: ClusterConfig,
    pub request: ReconfigRequest,
    pub a: Vec<u32>,
    pub params: Option<PathBuf>,
    pub seeds: u64,
    pub seed: u64,
}

impl Scenario {
    pub const DEFAULT_SEEDS: u64 = 1;

    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| CliError::new(ErrorKind::Parse, e.to_string()))?;
        Self::from_file(file, base)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn from_file(file: ScenarioFile, base: &Path) -> Result<Self, CliError> {
        let cluster = file.nodes.to_cluster();
        let request = ReconfigRequest::new(file.ns, file.nt, file.strategy, file.method);
        request.validate(&cluster).map_err(validation)?;
        let a = match file.a {
            Some(a) => {
                // reuses the allocation checks on length, per-node room and total
                let probe = ReconfigRequest { strategy: Strategy::IterativeDiffusive, ..request };
                build_allocation_with_sources(&cluster, &probe, &a).map_err(validation)?;
                a
            }
            None => pack(&cluster.cores(), request.ns),
        };
        Ok(Self {
            cluster,
            request,
            a,
            params: file.params.map(|p| if p.is_absolute() { p } else { base.join(p) }),
            seeds: file.seeds.unwrap_or(Self::DEFAULT_SEEDS),
            seed: file.seed.unwrap_or(0),
        })
    }

    /// Spawn schedule of the request: the difference for Merge, every target
    /// for Baseline.
    pub fn schedule(&self) -> Result<SpawnSchedule, CliError> {
        let alloc = match self.request.method {
            ResizeMethod::Merge => {
                if !self.request.is_expansion() {
                    return Err(validation("a Merge shrink spawns nothing and has no schedule"));
                }
                build_allocation_with_sources(&self.cluster, &self.request, &self.a)
            }
            ResizeMethod::Baseline => baseline_allocation(&self.cluster, &self.a, self.request.nt),
        }
        .map_err(validation)?;
        plan(&alloc, self.request.strategy).map_err(validation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "espsim", version, about = "Plan, simulate and cost parallel spawning for malleable jobs")]
pub struct Cli {
    /// Scenario JSON file.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Directory for output files; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the spawn schedule.
    Plan,
    /// Run the protocol simulation over a range of seeds.
    Simulate(SimulateArgs),
    /// Estimate reconfiguration costs and rank methods.
    Compare(CompareArgs),
    /// Simulate every target node count of a node set.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds to run.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// JSON-lines trace of every run.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Stop at the first failing seed.
    #[arg(long)]
    pub fail_fast: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Cost parameter JSON; overrides the scenario's.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// CSV best-method matrix over --node-set.
    #[arg(long)]
    pub matrix_out: Option<PathBuf>,
    /// Comma-separated node counts, ascending.
    #[arg(long, value_delimiter = ',')]
    pub node_set: Option<Vec<usize>>,
    /// Report a single method.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Target node counts; every count but the source one when absent.
    #[arg(long, value_delimiter = ',')]
    pub node_set: Option<Vec<usize>>,
    #[arg(long)]
    pub fail_fast: bool,
}

/// Serializes `schedule` in the requested format.
pub fn render_schedule(schedule: &SpawnSchedule, format: Format) -> Result<String, CliError> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(schedule).expect("schedule serializes")),
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            if schedule.events.is_empty() {
                writer
                    .write_record(["step", "parent_group", "parent_local_rank", "child_group", "target_node", "size"])
                    .map_err(validation)?;
            }
            for event in &schedule.events {
                writer.serialize(event).map_err(validation)?;
            }
            let bytes = writer.into_inner().map_err(validation)?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

pub fn cmd_plan(scenario: &Scenario, format: Format) -> Result<String, CliError> {
    info!("planning {} -> {} processes", scenario.request.ns, scenario.request.nt);
    render_schedule(&scenario.schedule()?, format)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSummary {
    pub first_seed: u64,
    pub seeds: u64,
    pub passed: u64,
    pub failed: u64,
    pub failures: Vec<SeedFailure>,
    pub groups: usize,
    pub rounds: u32,
    pub processes: usize,
    /// Every passing run produced the same pid to (rank, node) mapping.
    pub deterministic: bool,
}

impl SimSummary {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub summary: SimSummary,
    /// Seed and trace of each run, in seed order; only kept when asked for.
    pub traces: Vec<(u64, SimTrace)>,
}

/// Checks a finished run beyond the simulator's own fault detection.
fn check_outcome(outcome: &SimOutcome) -> Result<(), String> {
    outcome.trace.check_well_formed()?;
    outcome.trace.check_port_safety()?;
    if !outcome.world.is_permutation() {
        return Err("final ranks are not a permutation".into());
    }
    Ok(())
}

fn run_seed(scenario: &Scenario, seed: u64) -> Result<SimOutcome, SimError> {
    debug!("seed {seed}");
    let outcome = simulate_full_with(
        &scenario.cluster,
        &scenario.request,
        Some(&scenario.a),
        seed,
        SimOptions::default(),
    )?;
    check_outcome(&outcome).map_err(SimError::ProtocolFault)?;
    Ok(outcome)
}

/// Runs `seeds` consecutive seeds from `first_seed`. Input errors abort;
/// protocol failures are counted in the summary.
pub fn cmd_simulate(
    scenario: &Scenario,
    first_seed: u64,
    seeds: u64,
    fail_fast: bool,
    keep_traces: bool,
) -> Result<SimRun, CliError> {
    info!("simulating {seeds} seeds from {first_seed}");
    let seed_range = first_seed..first_seed.saturating_add(seeds);
    let results: Vec<(u64, Result<SimOutcome, SimError>)> = if fail_fast {
        let mut out = Vec::new();
        for seed in seed_range {
            let result = run_seed(scenario, seed);
            let failed = result.is_err();
            out.push((seed, result));
            if failed {
                break;
            }
        }
        out
    } else {
        seed_range.into_par_iter().map(|seed| (seed, run_seed(scenario, seed))).collect()
    };

    let mut summary = SimSummary {
        first_seed,
        seeds: results.len() as u64,
        passed: 0,
        failed: 0,
        failures: Vec::new(),
        groups: 0,
        rounds: 0,
        processes: 0,
        deterministic: true,
    };
    let mut reference = None;
    let mut traces = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(outcome) => {
                summary.passed += 1;
                summary.groups = outcome.schedule.as_ref().map_or(0, SpawnSchedule::groups);
                summary.rounds = summary.rounds.max(outcome.rounds);
                summary.processes = outcome.world.len();
                let mapping = outcome.world.mapping();
                match &reference {
                    None => reference = Some(mapping),
                    Some(first) => summary.deterministic &= *first == mapping,
                }
                if keep_traces {
                    traces.push((seed, outcome.trace));
                }
            }
            Err(err) if err.is_protocol() => {
                summary.failed += 1;
                summary.failures.push(SeedFailure { seed, error: err.to_string() });
            }
            Err(err) => return Err(err.into()),
        }
    }
    Ok(SimRun { summary, traces })
}

/// One JSON object per trace event, tagged with its seed.
pub fn write_traces<W: Write>(traces: &[(u64, SimTrace)], mut out: W) -> std::io::Result<()> {
    for (seed, trace) in traces {
        for event in &trace.events {
            let mut value = serde_json::to_value(event)?;
            value
                .as_object_mut()
                .expect("events serialize as objects")
                .insert("seed".into(), (*seed).into());
            serde_json::to_writer(&mut out, &value)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ns: u64,
    pub nt: u64,
    pub reports: Vec<CostReport>,
    /// Baseline total over Merge total, when both were evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<MethodMatrix>,
}

fn check_node_set(cluster: &ClusterConfig, node_set: &[usize]) -> Result<(), CliError> {
    if node_set.is_empty() {
        return Err(validation("node set is empty"));
    }
    if node_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(validation("node set must be strictly ascending"));
    }
    if node_set[0] == 0 || *node_set.last().unwrap() > cluster.len() {
        return Err(validation(format!("node counts must lie in 1..={}", cluster.len())));
    }
    Ok(())
}

pub fn cmd_compare(
    scenario: &Scenario,
    params: &CostParams,
    methods: &[Method],
    node_set: Option<&[usize]>,
) -> Result<Comparison, CliError> {
    let (ns, nt) = (scenario.request.ns, scenario.request.nt);
    info!("comparing {} methods for {ns} -> {nt}", methods.len());
    let shrink = if nt < ns {
        Some(crate::cluster::shrink_allocation(&scenario.cluster, ns, nt).map_err(validation)?)
    } else {
        None
    };
    let reports = methods
        .iter()
        .map(|&m| match &shrink {
            Some(plan) => cost_shrink(m, plan, params),
            None => cost_expand(m, &scenario.cluster, ns, nt, params),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let total_of = |m: Method| reports.iter().find(|r| r.method == m).map(|r| r.total);
    let speedup = match (total_of(Method::Baseline), total_of(Method::Merge)) {
        (Some(b), Some(m)) if m > 0.0 => Some(b / m),
        _ => None,
    };
    let matrix = match node_set {
        Some(set) => {
            check_node_set(&scenario.cluster, set)?;
            Some(best_method_matrix(&scenario.cluster, set, params)?)
        }
        None => None,
    };
    Ok(Comparison { ns, nt, reports, speedup, matrix })
}

pub fn render_reports(reports: &[CostReport]) -> Result<String, CliError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "method", "ns", "nt", "spawn", "sync", "connect", "reorder", "terminate", "total",
            "released_nodes", "spawn_rounds",
        ])
        .map_err(validation)?;
    for r in reports {
        let p = &r.phases;
        writer
            .write_record([
                r.method.to_string(),
                r.ns.to_string(),
                r.nt.to_string(),
                p.spawn.to_string(),
                p.sync.to_string(),
                p.connect.to_string(),
                p.reorder.to_string(),
                p.terminate.to_string(),
                r.total.to_string(),
                r.released_nodes.to_string(),
                r.spawn_rounds.to_string(),
            ])
            .map_err(validation)?;
    }
    let bytes = writer.into_inner().map_err(validation)?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub nt_nodes: usize,
    pub nt: u64,
    #[serde(flatten)]
    pub summary: SimSummary,
}

pub fn cmd_sweep(
    scenario: &Scenario,
    node_set: &[usize],
    first_seed: u64,
    seeds: u64,
    fail_fast: bool,
) -> Result<Vec<SweepRow>, CliError> {
    check_node_set(&scenario.cluster, node_set)?;
    let mut rows = Vec::new();
    for &nt_nodes in node_set {
        let nt = scenario.cluster.prefix_capacity(nt_nodes);
        if nt == scenario.request.ns {
            continue;
        }
        let mut point = scenario.clone();
        point.request.nt = nt;
        point.request.validate(&point.cluster).map_err(validation)?;
        let run = cmd_simulate(&point, first_seed, seeds, fail_fast, false)?;
        let failed = !run.summary.all_passed();
        rows.push(SweepRow { nt_nodes, nt, summary: run.summary });
        if failed && fail_fast {
            break;
        }
    }
    Ok(rows)
}

/// Writes `content` to `dir/name`, or to stdout without a directory.
fn emit(out: Option<&Path>, name: &str, content: &str) -> Result<(), CliError> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| io_error(&path, e))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let newline = if content.ends_with('\n') { "" } else { "\n" };
            write!(stdout, "{content}{newline}").map_err(|e| io_error(Path::new("<stdout>"), e))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes")
}

fn load_scenario(cli: &Cli) -> Result<Scenario, CliError> {
    let path = cli
        .scenario
        .as_deref()
        .ok_or_else(|| CliError::new(ErrorKind::Validation, "--scenario is required"))?;
    Scenario::load(path)
}

fn protocol_failure(failed: u64, total: u64) -> CliError {
    CliError::new(ErrorKind::Protocol, format!("{failed} of {total} runs failed"))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let scenario = load_scenario(cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Plan => {
            let name = match cli.format {
                Format::Json => "plan.json",
                Format::Csv => "plan.csv",
            };
            emit(out, name, &cmd_plan(&scenario, cli.format)?)
        }
        Command::Simulate(args) => {
            let seeds = args.seeds.unwrap_or(scenario.seeds);
            let first = args.seed.unwrap_or(scenario.seed);
            let run = cmd_simulate(&scenario, first, seeds, args.fail_fast, args.trace_out.is_some())?;
            if let Some(path) = &args.trace_out {
                if seeds > 0 {
                    let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
                    write_traces(&run.traces, std::io::BufWriter::new(file)).map_err(|e| io_error(path, e))?;
                }
            }
            emit(out, "summary.json", &to_json(&run.summary))?;
            if run.summary.all_passed() {
                Ok(())
            } else {
                Err(protocol_failure(run.summary.failed, run.summary.seeds))
            }
        }
        Command::Compare(args) => {
            let params = match args.params.as_ref().or(scenario.params.as_ref()) {
                Some(path) => CostParams::load(path)?,
                None => CostParams::default(),
            };
            let methods = match &args.method {
                Some(name) => vec![name.parse::<Method>()?],
                None => Method::ALL.to_vec(),
            };
            let comparison = cmd_compare(&scenario, &params, &methods, args.node_set.as_deref())?;
            if let (Some(path), Some(matrix)) = (&args.matrix_out, &comparison.matrix) {
                let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
                matrix.write_csv(file).map_err(validation)?;
            } else if args.matrix_out.is_some() {
                return Err(validation("--matrix-out needs --node-set"));
            }
            match cli.format {
                Format::Json => emit(out, "compare.json", &to_json(&comparison)),
                Format::Csv => emit(out, "compare.csv", &render_reports(&comparison.reports)?),
            }
        }
        Command::Sweep(args) => {
            let node_set = match &args.node_set {
                Some(set) => set.clone(),
                None => (1..=scenario.cluster.len()).collect(),
            };
            let seeds = args.seeds.unwrap_or(scenario.seeds);
            let first = args.seed.unwrap_or(scenario.seed);
            let rows = cmd_sweep(&scenario, &node_set, first, seeds, args.fail_fast)?;
            emit(out, "sweep.json", &to_json(&rows))?;
            let failed: u64 = rows.iter().map(|r| r.summary.failed).sum();
            let total: u64 = rows.iter().map(|r| r.summary.seeds).sum();
            if failed == 0 {
                Ok(())
            } else {
                Err(protocol_failure(failed, total))
            }
        }
    }
}
