//! Analytic reconfiguration cost model.
//!
//! Costs are closed formulas over spawn schedules and process counts, in
//! arbitrary time units. The shipped calibration is illustrative only: it
//! reproduces orderings and ratios, not any machine's wall-clock times.

use crate::cluster::{
    baseline_allocation, build_allocation, pack, ClusterConfig, ClusterError, ReconfigRequest,
    ResizeMethod, ShrinkPlan, Strategy,
};
use crate::planner::{plan_diffusive, PlanError, SpawnSchedule};
use crate::cluster::AllocationVectors;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

const DEFAULT_PARAMS: &str = include_str!("../config/default_params.json");

#[derive(Debug, Error)]
pub enum CostError {
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
    #[error("invalid cost parameters: {0}")]
    InvalidParams(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed cost parameters: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// Fixed cost of one spawn call.
    pub spawn_base: f64,
    pub spawn_per_proc: f64,
    /// One accept/connect pair.
    pub connect: f64,
    /// One intercommunicator merge.
    pub merge: f64,
    pub barrier: f64,
    /// One point-to-point token.
    pub msg: f64,
    /// Terminating one process.
    pub terminate: f64,
    /// Slowdown of spawning while sources and targets share cores.
    pub oversub_factor: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_PARAMS).expect("bundled calibration is valid")
    }
}

impl CostParams {
    pub fn from_json(text: &str) -> Result<Self, CostError> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CostError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("spawn_base", self.spawn_base),
            ("spawn_per_proc", self.spawn_per_proc),
            ("connect", self.connect),
            ("merge", self.merge),
            ("barrier", self.barrier),
            ("msg", self.msg),
            ("terminate", self.terminate),
        ];
        for (name, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(CostError::InvalidParams(format!("{name} must be a non-negative number")));
            }
        }
        if !self.oversub_factor.is_finite() || self.oversub_factor < 1.0 {
            return Err(CostError::InvalidParams("oversub_factor must be >= 1".into()));
        }
        Ok(())
    }

    fn spawn_call(&self, procs: u64) -> f64 {
        self.spawn_base + self.spawn_per_proc * procs as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Merge,
    ParallelMerge,
    Baseline,
    ParallelBaseline,
    /// Merge with one spawn call per target node, issued by a single process.
    Sequential,
}

impl Method {
    /// Methods ranked in best-method matrices. Order breaks cost ties.
    pub const COMPARED: [Method; 4] =
        [Method::Merge, Method::ParallelMerge, Method::Baseline, Method::ParallelBaseline];

    pub const ALL: [Method; 5] = [
        Method::Merge,
        Method::ParallelMerge,
        Method::Baseline,
        Method::ParallelBaseline,
        Method::Sequential,
    ];

    pub fn is_parallel(self) -> bool {
        matches!(self, Self::ParallelMerge | Self::ParallelBaseline)
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Self::Baseline | Self::ParallelBaseline)
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::Merge => "M",
            Self::ParallelMerge => "PM",
            Self::Baseline => "B",
            Self::ParallelBaseline => "PB",
            Self::Sequential => "S",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Method {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace(['-', '_', ' '], "");
        match key.as_str() {
            "merge" | "m" => Ok(Self::Merge),
            "parallelmerge" | "pm" => Ok(Self::ParallelMerge),
            "baseline" | "b" => Ok(Self::Baseline),
            "parallelbaseline" | "pb" => Ok(Self::ParallelBaseline),
            "sequential" | "s" => Ok(Self::Sequential),
            _ => Err(CostError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseBreakdown {
    pub spawn: f64,
    pub sync: f64,
    pub connect: f64,
    pub reorder: f64,
    pub terminate: f64,
}

impl PhaseBreakdown {
    pub fn total(&self) -> f64 {
        self.spawn + self.sync + self.connect + self.reorder + self.terminate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub ns: u64,
    pub nt: u64,
    pub phases: PhaseBreakdown,
    pub total: f64,
    pub released_nodes: usize,
    /// Spawn calls on the critical path: steps for parallel methods, calls
    /// for sequential ones.
    pub spawn_rounds: u32,
}

impl CostReport {
    fn new(method: Method, ns: u64, nt: u64, phases: PhaseBreakdown, spawn_rounds: u32) -> Self {
        Self { method, ns, nt, total: phases.total(), phases, released_nodes: 0, spawn_rounds }
    }
}

/// Classic single-call methods, which only need process counts.
pub fn cost_expand_sizes(method: Method, ns: u64, nt: u64, params: &CostParams) -> Result<CostReport, CostError> {
    params.validate()?;
    let delta = nt.saturating_sub(ns);
    let mut phases = PhaseBreakdown::default();
    let rounds;
    match method {
        Method::Merge => {
            if delta > 0 {
                phases.spawn = params.spawn_call(delta);
                phases.connect = params.merge;
            }
            rounds = u32::from(delta > 0);
        }
        Method::Baseline => {
            phases.spawn = params.spawn_call(nt) * params.oversub_factor;
            phases.terminate = params.terminate * ns as f64;
            rounds = 1;
        }
        other => {
            return Err(CostError::UnknownMethod(format!("{other} needs a spawn schedule")));
        }
    }
    Ok(CostReport::new(method, ns, nt, phases, rounds))
}

/// Methods that follow a spawn schedule: the parallel strategies and
/// node-sequential spawning.
pub fn cost_expand_schedule(
    method: Method,
    alloc: &AllocationVectors,
    schedule: &SpawnSchedule,
    params: &CostParams,
) -> Result<CostReport, CostError> {
    params.validate()?;
    let ns = alloc.sources();
    let nt = match method {
        Method::ParallelBaseline => alloc.spawned(),
        _ => ns + alloc.spawned(),
    };
    let groups = schedule.groups() as u64;
    let mut phases = PhaseBreakdown::default();
    let rounds;
    match method {
        Method::Sequential => {
            phases.spawn = schedule.events.iter().map(|e| params.spawn_call(u64::from(e.size))).sum();
            phases.connect = params.merge * groups as f64;
            rounds = groups as u32;
        }
        Method::ParallelMerge | Method::ParallelBaseline => {
            phases.spawn = (1..=schedule.steps)
                .map(|step| {
                    let widest = schedule
                        .events
                        .iter()
                        .filter(|e| e.step == step)
                        .map(|e| u64::from(e.size))
                        .max()
                        .unwrap_or(0);
                    params.spawn_call(widest)
                })
                .sum();
            if method == Method::ParallelBaseline {
                phases.spawn *= params.oversub_factor;
                phases.terminate = params.terminate * ns as f64;
            }
            if groups > 0 {
                let depth = f64::from(schedule.tree_depth());
                phases.sync = 2.0 * depth * params.msg + (2.0 * depth + 1.0) * params.barrier;
                phases.connect = f64::from(binary_rounds(groups)) * (params.connect + params.merge);
                phases.reorder = params.barrier + params.connect;
            }
            rounds = schedule.steps;
        }
        other => {
            return Err(CostError::UnknownMethod(format!("{other} does not use a spawn schedule")));
        }
    }
    Ok(CostReport::new(method, ns, nt, phases, rounds))
}

/// `ceil(log2 groups)` for `groups >= 1`.
pub fn binary_rounds(groups: u64) -> u32 {
    if groups <= 1 {
        0
    } else {
        64 - (groups - 1).leading_zeros()
    }
}

/// Expansion from `ns` sources packed on the first nodes to `nt` processes.
pub fn cost_expand(
    method: Method,
    cluster: &ClusterConfig,
    ns: u64,
    nt: u64,
    params: &CostParams,
) -> Result<CostReport, CostError> {
    let request = ReconfigRequest::new(ns, nt, Strategy::IterativeDiffusive, ResizeMethod::Merge);
    request.validate(cluster)?;
    if nt < ns {
        return Err(ClusterError::InvalidShrink { ns, nt }.into());
    }
    match method {
        Method::Merge | Method::Baseline => cost_expand_sizes(method, ns, nt, params),
        Method::ParallelMerge | Method::Sequential => {
            let alloc = build_allocation(cluster, &request)?;
            let schedule = plan_diffusive(&alloc)?;
            cost_expand_schedule(method, &alloc, &schedule, params)
        }
        Method::ParallelBaseline => {
            let a = pack(&cluster.cores(), ns);
            let alloc = baseline_allocation(cluster, &a, nt)?;
            let schedule = plan_diffusive(&alloc)?;
            cost_expand_schedule(method, &alloc, &schedule, params)
        }
    }
}

pub fn cost_shrink(method: Method, plan: &ShrinkPlan, params: &CostParams) -> Result<CostReport, CostError> {
    params.validate()?;
    let (ns, nt) = (plan.ns, plan.nt);
    let mut report = match method {
        Method::Merge | Method::ParallelMerge | Method::Sequential => {
            let phases = PhaseBreakdown {
                terminate: params.terminate * plan.terminated() as f64,
                ..PhaseBreakdown::default()
            };
            CostReport::new(method, ns, nt, phases, 0)
        }
        Method::Baseline => {
            let phases = PhaseBreakdown {
                spawn: params.spawn_call(nt) * params.oversub_factor,
                terminate: params.terminate * ns as f64,
                ..PhaseBreakdown::default()
            };
            CostReport::new(method, ns, nt, phases, 1)
        }
        Method::ParallelBaseline => {
            let cluster = ClusterConfig::from_cores(&plan.cores());
            let alloc = baseline_allocation(&cluster, &plan.source_layout(), nt)?;
            let schedule = plan_diffusive(&alloc)?;
            let mut report = cost_expand_schedule(method, &alloc, &schedule, params)?;
            report.ns = ns;
            report.nt = nt;
            report
        }
    };
    report.released_nodes = plan.released_count();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkComparison {
    pub baseline: CostReport,
    pub merge: CostReport,
    /// Baseline time over Merge time.
    pub speedup: f64,
}

pub fn compare_shrink(plan: &ShrinkPlan, params: &CostParams) -> Result<ShrinkComparison, CostError> {
    let baseline = cost_shrink(Method::Baseline, plan, params)?;
    let merge = cost_shrink(Method::Merge, plan, params)?;
    let speedup = if merge.total > 0.0 { baseline.total / merge.total } else { f64::INFINITY };
    Ok(ShrinkComparison { baseline, merge, speedup })
}

/// Every compared method for one resize, cheapest first.
pub fn rank_methods(
    cluster: &ClusterConfig,
    ns: u64,
    nt: u64,
    params: &CostParams,
) -> Result<Vec<CostReport>, CostError> {
    let mut reports = Method::COMPARED
        .iter()
        .map(|&m| {
            if nt > ns {
                cost_expand(m, cluster, ns, nt, params)
            } else {
                let plan = crate::cluster::shrink_allocation(cluster, ns, nt)?;
                cost_shrink(m, &plan, params)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    // stable: ties keep the COMPARED order
    reports.sort_by(|a, b| a.total.total_cmp(&b.total));
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMethod {
    pub method: Method,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub ns_nodes: usize,
    pub nt_nodes: usize,
    pub ranking: Vec<RankedMethod>,
}

impl MatrixCell {
    pub fn best(&self) -> Method {
        self.ranking[0].method
    }

    pub fn is_expansion(&self) -> bool {
        self.nt_nodes > self.ns_nodes
    }
}

/// Methods ranked by estimated cost for every (source nodes, target nodes)
/// pair of `node_set`, diagonal excluded. Sources and targets occupy the
/// first nodes of the cluster, fully.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMatrix {
    pub node_set: Vec<usize>,
    pub cells: Vec<MatrixCell>,
}

impl MethodMatrix {
    pub fn cell(&self, ns_nodes: usize, nt_nodes: usize) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.ns_nodes == ns_nodes && c.nt_nodes == nt_nodes)
    }

    /// Rows are source node counts, columns target node counts; each entry
    /// lists methods cheapest first, joined by `>`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["NS\\NT".to_string()];
        header.extend(self.node_set.iter().map(|n| n.to_string()));
        writer.write_record(&header)?;
        for &ns in &self.node_set {
            let mut row = vec![ns.to_string()];
            for &nt in &self.node_set {
                row.push(self.cell(ns, nt).map_or_else(String::new, |c| {
                    c.ranking.iter().map(|r| r.method.short()).collect::<Vec<_>>().join(">")
                }));
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn best_method_matrix(
    cluster: &ClusterConfig,
    node_set: &[usize],
    params: &CostParams,
) -> Result<MethodMatrix, CostError> {
    let mut cells = Vec::new();
    for &ns_nodes in node_set {
        for &nt_nodes in node_set {
            if ns_nodes == nt_nodes {
                continue;
            }
            let ns = cluster.prefix_capacity(ns_nodes);
            let nt = cluster.prefix_capacity(nt_nodes);
            let ranking = rank_methods(cluster, ns, nt, params)?
                .into_iter()
                .map(|r| RankedMethod { method: r.method, cost: r.total })
                .collect();
            cells.push(MatrixCell { ns_nodes, nt_nodes, ranking });
        }
    }
    Ok(MethodMatrix { node_set: node_set.to_vec(), cells })
}
