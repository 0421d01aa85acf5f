//! Spawn schedules for parallel process creation.
//!
//! Both strategies grow the job in steps: at every step each active process
//! (sources first, then spawned groups by id, each group by local rank) spawns
//! one new group on the next pending node. Hypercube assumes homogeneous
//! full-node groups; Iterative Diffusive accepts per-node group sizes taken
//! from the S vector with null entries skipped.

use crate::cluster::{AllocationVectors, ClusterError};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("target node count {target} is below the initial node count {initial}")]
    InvalidGeometry { target: u64, initial: u64 },
    #[error("cores per node and initial nodes must be at least 1")]
    ZeroGeometry,
    #[error("value exceeds the 64-bit range")]
    Overflow,
    #[error("hypercube strategy needs every node to offer {cores} cores")]
    NotHomogeneous { cores: u32 },
    #[error("{count} processes is not a multiple of {cores} cores per node")]
    NonDivisible { count: u64, cores: u32 },
    #[error("allocation has no node with processes to spawn")]
    NothingToSpawn,
    #[error(transparent)]
    Allocation(#[from] ClusterError),
}

/// Identifies a process group: the original source world or a spawned group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupRef {
    Source,
    Group(u32),
}

impl GroupRef {
    pub fn id(self) -> Option<u32> {
        match self {
            Self::Source => None,
            Self::Group(g) => Some(g),
        }
    }
}

impl fmt::Display for GroupRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Source => f.write_str("SOURCE"),
            Self::Group(g) => write!(f, "{g}"),
        }
    }
}

impl Serialize for GroupRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Source => serializer.serialize_str("SOURCE"),
            Self::Group(g) => serializer.serialize_u32(*g),
        }
    }
}

impl<'de> Deserialize<'de> for GroupRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct GroupRefVisitor;

        impl Visitor<'_> for GroupRefVisitor {
            type Value = GroupRef;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a group id or \"SOURCE\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<GroupRef, E> {
                u32::try_from(v).map(GroupRef::Group).map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<GroupRef, E> {
                u32::try_from(v).map(GroupRef::Group).map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<GroupRef, E> {
                if v.eq_ignore_ascii_case("source") {
                    Ok(GroupRef::Source)
                } else {
                    v.parse().map(GroupRef::Group).map_err(E::custom)
                }
            }
        }

        deserializer.deserialize_any(GroupRefVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnEvent {
    pub step: u32,
    pub parent_group: GroupRef,
    pub parent_local_rank: u32,
    pub child_group: u32,
    pub target_node: usize,
    pub size: u32,
}

/// Per-step growth figures. Step 0 is the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTotals {
    pub step: u32,
    /// Processes present after the step.
    #[serde(rename = "t")]
    pub processes: u64,
    /// Processes generated during the step.
    #[serde(rename = "g")]
    pub generated: u64,
    /// Nodes newly occupied during the step.
    #[serde(rename = "G")]
    pub new_nodes: u64,
    /// Cumulative occupied nodes.
    #[serde(rename = "T")]
    pub nodes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnSchedule {
    pub steps: u32,
    pub events: Vec<SpawnEvent>,
    pub totals: Vec<StepTotals>,
}

impl SpawnSchedule {
    /// Number of spawned groups.
    pub fn groups(&self) -> usize {
        self.events.len()
    }

    /// Events ordered by child group id. Planners already emit them this way.
    pub fn by_group(&self) -> Vec<&SpawnEvent> {
        let mut events: Vec<_> = self.events.iter().collect();
        events.sort_by_key(|e| e.child_group);
        events
    }

    pub fn group_sizes(&self) -> Vec<u32> {
        self.by_group().iter().map(|e| e.size).collect()
    }

    pub fn step_sizes(&self) -> Vec<usize> {
        (1..=self.steps)
            .map(|s| self.events.iter().filter(|e| e.step == s).count())
            .collect()
    }

    pub fn event_for(&self, group: u32) -> Option<&SpawnEvent> {
        self.events.iter().find(|e| e.child_group == group)
    }

    /// Spawn events issued by one process, in step order.
    pub fn spawned_by(&self, parent: GroupRef, local_rank: u32) -> Vec<&SpawnEvent> {
        let mut events: Vec<_> = self
            .events
            .iter()
            .filter(|e| e.parent_group == parent && e.parent_local_rank == local_rank)
            .collect();
        events.sort_by_key(|e| e.step);
        events
    }

    /// Length of the longest parent chain from the sources to a leaf group.
    pub fn tree_depth(&self) -> u32 {
        let by_group = self.by_group();
        let mut depth = vec![0u32; by_group.len()];
        for e in &by_group {
            let parent_depth = match e.parent_group {
                GroupRef::Source => 0,
                GroupRef::Group(p) => depth[p as usize],
            };
            depth[e.child_group as usize] = parent_depth + 1;
        }
        depth.into_iter().max().unwrap_or(0)
    }
}

/// Smallest `s` with `(1 + C)^s * I >= N`.
pub fn hypercube_steps(target_nodes: u64, initial_nodes: u64, cores: u64) -> Result<u32, PlanError> {
    if initial_nodes == 0 || cores == 0 {
        return Err(PlanError::ZeroGeometry);
    }
    if target_nodes < initial_nodes {
        return Err(PlanError::InvalidGeometry { target: target_nodes, initial: initial_nodes });
    }
    let factor = cores.checked_add(1).ok_or(PlanError::Overflow)?;
    let mut nodes = initial_nodes;
    let mut steps = 0;
    while nodes < target_nodes {
        // saturating is fine here: once past target_nodes the loop exits
        nodes = nodes.saturating_mul(factor);
        steps += 1;
    }
    Ok(steps)
}

/// `(T_s, t_s)`: occupied nodes and processes after `step` hypercube steps.
pub fn hypercube_totals(step: u32, initial_nodes: u64, cores: u64) -> Result<(u64, u64), PlanError> {
    let factor = cores.checked_add(1).ok_or(PlanError::Overflow)?;
    let nodes = factor
        .checked_pow(step)
        .and_then(|p| p.checked_mul(initial_nodes))
        .ok_or(PlanError::Overflow)?;
    let procs = nodes.checked_mul(cores).ok_or(PlanError::Overflow)?;
    Ok((nodes, procs))
}

pub fn plan_hypercube(alloc: &AllocationVectors, cores: u32) -> Result<SpawnSchedule, PlanError> {
    alloc.validate()?;
    if cores == 0 {
        return Err(PlanError::ZeroGeometry);
    }
    if alloc.m.iter().any(|&m| m != cores) {
        return Err(PlanError::NotHomogeneous { cores });
    }
    let sources = alloc.sources();
    if !sources.is_multiple_of(u64::from(cores)) || alloc.a.iter().any(|&a| a != 0 && a != cores) {
        return Err(PlanError::NonDivisible { count: sources, cores });
    }
    let targets = alloc.compacted_targets();
    if targets.is_empty() {
        return Err(PlanError::NothingToSpawn);
    }
    if targets.iter().any(|&(_, size)| size != cores) {
        return Err(PlanError::NonDivisible { count: alloc.spawned(), cores });
    }

    let group_count = targets.len() as u64;
    let mut events = Vec::with_capacity(targets.len());
    let mut created = 0u64;
    let mut step = 0u32;
    while created < group_count {
        step += 1;
        let active = sources + created * u64::from(cores);
        let spawning = active.min(group_count - created);
        for j in 0..spawning {
            let (parent_group, parent_local_rank) = if j < sources {
                (GroupRef::Source, j as u32)
            } else {
                let offset = j - sources;
                (
                    GroupRef::Group((offset / u64::from(cores)) as u32),
                    (offset % u64::from(cores)) as u32,
                )
            };
            let child = (created + j) as usize;
            events.push(SpawnEvent {
                step,
                parent_group,
                parent_local_rank,
                child_group: child as u32,
                target_node: targets[child].0,
                size: cores,
            });
        }
        created += spawning;
    }

    let totals = totals_from_events(alloc, &events, step);
    Ok(SpawnSchedule { steps: step, events, totals })
}

pub fn plan_diffusive(alloc: &AllocationVectors) -> Result<SpawnSchedule, PlanError> {
    alloc.validate()?;
    let targets = alloc.compacted_targets();
    if targets.is_empty() {
        return Err(PlanError::NothingToSpawn);
    }

    let sources = alloc.sources();
    let mut active: Vec<(GroupRef, u32)> =
        (0..sources).map(|r| (GroupRef::Source, r as u32)).collect();
    let mut events = Vec::with_capacity(targets.len());
    let mut pending = targets.iter().enumerate().peekable();
    let mut step = 0u32;
    while pending.peek().is_some() {
        step += 1;
        let mut born = Vec::new();
        for &(parent_group, parent_local_rank) in &active {
            let Some((group, &(node, size))) = pending.next() else {
                break;
            };
            events.push(SpawnEvent {
                step,
                parent_group,
                parent_local_rank,
                child_group: group as u32,
                target_node: node,
                size,
            });
            born.push((group as u32, size));
        }
        for (group, size) in born {
            active.extend((0..size).map(|r| (GroupRef::Group(group), r)));
        }
    }

    let totals = totals_from_events(alloc, &events, step);
    Ok(SpawnSchedule { steps: step, events, totals })
}

/// Plans with the strategy-appropriate planner.
pub fn plan(
    alloc: &AllocationVectors,
    strategy: crate::cluster::Strategy,
) -> Result<SpawnSchedule, PlanError> {
    match strategy {
        crate::cluster::Strategy::Hypercube => {
            let cores = alloc.m.first().copied().ok_or(PlanError::ZeroGeometry)?;
            plan_hypercube(alloc, cores)
        }
        crate::cluster::Strategy::IterativeDiffusive => plan_diffusive(alloc),
    }
}

fn totals_from_events(alloc: &AllocationVectors, events: &[SpawnEvent], steps: u32) -> Vec<StepTotals> {
    let mut totals = Vec::with_capacity(steps as usize + 1);
    let mut current = StepTotals {
        step: 0,
        processes: alloc.sources(),
        generated: 0,
        new_nodes: 0,
        nodes: alloc.initial_nodes() as u64,
    };
    totals.push(current);
    for step in 1..=steps {
        let (count, generated) = events
            .iter()
            .filter(|e| e.step == step)
            .fold((0u64, 0u64), |(n, g), e| (n + 1, g + u64::from(e.size)));
        current = StepTotals {
            step,
            processes: current.processes + generated,
            generated,
            new_nodes: count,
            nodes: current.nodes + count,
        };
        totals.push(current);
    }
    totals
}

/// Closed-form growth sequence over the compacted S vector.
///
/// `t_0 = sum(A)`, `T_0 = I` (nodes with sources). For `s >= 1`:
/// `nu_s = sum(t_0..t_{s-2})`, `lambda_s = min(N' - 1, sum(t_0..t_{s-1}) - 1)`,
/// `g_s = sum(S'[nu_s..=lambda_s])`, `t_s = t_{s-1} + g_s`,
/// `G_s = min(N - T_{s-1}, t_{s-1})`, `T_s = T_{s-1} + G_s`, where `N' = |S'|`
/// and `N = I + N'`.
pub fn predict_totals(alloc: &AllocationVectors) -> Result<Vec<StepTotals>, PlanError> {
    alloc.validate()?;
    let compact: Vec<u64> = alloc
        .s
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| s as u64)
        .collect();
    let groups = compact.len() as u64;
    let initial = alloc.initial_nodes() as u64;
    let node_span = initial + groups;

    let mut t = vec![alloc.sources()];
    let mut totals = vec![StepTotals {
        step: 0,
        processes: t[0],
        generated: 0,
        new_nodes: 0,
        nodes: initial,
    }];
    let mut step = 0u32;
    loop {
        step += 1;
        let s = step as usize;
        let nu: u64 = t[..s - 1].iter().sum();
        if nu >= groups {
            break;
        }
        let reach: u64 = t[..s].iter().sum();
        if reach == 0 {
            // no process exists to spawn anything
            break;
        }
        let lambda = (groups - 1).min(reach - 1);
        let generated: u64 = compact[nu as usize..=lambda as usize].iter().sum();
        let prev = totals[s - 1];
        let new_nodes = (node_span - prev.nodes).min(prev.processes);
        let next = StepTotals {
            step,
            processes: prev.processes + generated,
            generated,
            new_nodes,
            nodes: prev.nodes + new_nodes,
        };
        t.push(next.processes);
        totals.push(next);
    }
    Ok(totals)
}
