//! Discrete-event simulation of the post-spawn protocol: port publication,
//! upside/downside synchronization, mirror-pair binary connection, rank
//! reordering and the final source-target link.
//!
//! Delivery is reliable and FIFO per (sender, receiver) pair; the global
//! interleaving of enabled actions is chosen by a seeded RNG, so a seed fully
//! determines a run. Runs share no state and may execute on any thread.

mod engine;
pub mod explore;
mod ports;
mod reorder;
mod trace;

pub use engine::{acceptors, Action, Comm, CommKind, Layout, Phase, PortMatching, SimProcess, Stages, World};
pub use ports::{PortRecord, PortRegistry};
pub use reorder::{connect_sources, reorder_key, reorder_ranks, MergedWorld, SourceLink, WorldMember};
pub use trace::{EventKind, Pid, SimTrace, TraceEvent};

use crate::cluster::{
    baseline_allocation, build_allocation_with_sources, pack, shrink_from_layout, AllocationVectors,
    ClusterConfig, ClusterError, ReconfigRequest, ResizeMethod,
};
use crate::planner::{plan, GroupRef, PlanError, SpawnSchedule};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("deadlock detected: {}", blocked.join("; "))]
    DeadlockDetected { blocked: Vec<String> },
    #[error("pid {actor} connected to port {port} before it was opened and published")]
    PortFault { port: GroupRef, actor: Pid },
    #[error("protocol fault: {0}")]
    ProtocolFault(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl SimError {
    /// Faults of the protocol itself, as opposed to invalid input.
    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            Self::DeadlockDetected { .. } | Self::PortFault { .. } | Self::ProtocolFault(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    /// Run the upside/downside synchronization before connecting. Turning it
    /// off exposes connects racing ahead of port publication.
    pub sync: bool,
    pub matching: PortMatching,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { sync: true, matching: PortMatching::ByRound }
    }
}

/// Node of every source rank, in rank order.
pub fn source_nodes(a: &[u32]) -> Vec<usize> {
    a.iter()
        .enumerate()
        .flat_map(|(node, &count)| std::iter::repeat_n(node, count as usize))
        .collect()
}

/// Runs `layout` to completion, picking among enabled actions with `seed`.
pub fn drive(layout: &Layout, seed: u64) -> Result<(World, SimTrace), SimError> {
    let (mut world, setup) = World::new(layout);
    let mut trace = SimTrace::default();
    trace.record_at(0, setup);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = Vec::new();
    loop {
        let actions = world.enabled();
        if actions.is_empty() {
            if world.is_complete() {
                return Ok((world, trace));
            }
            return Err(SimError::DeadlockDetected { blocked: world.blocked() });
        }
        let action = actions[rng.gen_range(0..actions.len())];
        world.apply(layout, action, &mut buf)?;
        trace.record_tick(buf.drain(..));
    }
}

/// Spawn and synchronization only; every process ends past the downside
/// step.
pub fn simulate_sync(
    alloc: &AllocationVectors,
    schedule: &SpawnSchedule,
    seed: u64,
) -> Result<SimTrace, SimError> {
    let stages = Stages {
        spawn: true,
        sync: true,
        binary: false,
        source_port: false,
        preopen: false,
        matching: PortMatching::ByRound,
    };
    let layout = Layout::from_schedule(&source_nodes(&alloc.a), schedule, stages);
    drive(&layout, seed).map(|(_, trace)| trace)
}

/// Binary connection of already-synchronized groups with the given sizes.
/// All accepting ports are open before the first action.
pub fn simulate_binary_connection(
    group_sizes: &[u32],
    seed: u64,
) -> Result<(MergedWorld, SimTrace), SimError> {
    binary_connection_with(group_sizes, seed, PortMatching::ByRound)
}

pub fn binary_connection_with(
    group_sizes: &[u32],
    seed: u64,
    matching: PortMatching,
) -> Result<(MergedWorld, SimTrace), SimError> {
    if group_sizes.is_empty() || group_sizes.contains(&0) {
        return Err(SimError::ProtocolFault("binary connection needs non-empty groups".into()));
    }
    let stages = Stages {
        spawn: false,
        sync: false,
        binary: true,
        source_port: false,
        preopen: true,
        matching,
    };
    let layout = Layout::groups_only(group_sizes, stages);
    let (world, trace) = drive(&layout, seed)?;
    let root = layout.root(GroupRef::Group(0)).expect("group 0 exists");
    let pids = &world.comms()[world.comm_of(root) as usize].members;
    Ok((MergedWorld::from_pids(&layout, pids), trace))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub world: MergedWorld,
    pub trace: SimTrace,
    pub link: SourceLink,
    pub rounds: u32,
    pub processes: Vec<SimProcess>,
    pub schedule: Option<SpawnSchedule>,
}

pub fn simulate_full(
    cluster: &ClusterConfig,
    request: &ReconfigRequest,
    seed: u64,
) -> Result<SimOutcome, SimError> {
    simulate_full_with(cluster, request, None, seed, SimOptions::default())
}

/// Full pipeline: plan, spawn, synchronize, connect, reorder and link to the
/// sources. Merge shrinks skip spawning and only terminate processes.
pub fn simulate_full_with(
    cluster: &ClusterConfig,
    request: &ReconfigRequest,
    sources: Option<&[u32]>,
    seed: u64,
    options: SimOptions,
) -> Result<SimOutcome, SimError> {
    request.validate(cluster)?;
    let a = match sources {
        Some(a) => a.to_vec(),
        None => pack(&cluster.cores(), request.ns),
    };
    if !request.is_expansion() && request.method == ResizeMethod::Merge {
        return merge_shrink(cluster, &a, request.nt, seed);
    }

    let alloc = match request.method {
        ResizeMethod::Merge => build_allocation_with_sources(cluster, request, &a)?,
        ResizeMethod::Baseline => baseline_allocation(cluster, &a, request.nt)?,
    };
    let schedule = plan(&alloc, request.strategy)?;
    let stages = Stages {
        spawn: true,
        sync: options.sync,
        binary: true,
        source_port: true,
        preopen: false,
        matching: options.matching,
    };
    let layout = Layout::from_schedule(&source_nodes(&a), &schedule, stages);
    let (world, mut trace) = drive(&layout, seed)?;
    let rounds = trace.rounds();

    let root = layout.root(GroupRef::Group(0)).expect("schedule has groups");
    let merged_comm = world.comm_of(root);
    let merged = MergedWorld::from_pids(&layout, &world.comms()[merged_comm as usize].members);
    let spawned = reorder_ranks(&merged, &alloc, &schedule);

    let merged_root = merged.root().map_or(root, |m| m.pid);
    let mut closing = vec![TraceEvent::new(EventKind::Split, merged_root, "reorder ranks").comm(merged_comm)];
    for (id, comm) in world.comms().iter().enumerate() {
        if matches!(comm.kind, CommKind::Inter | CommKind::Merged) && !comm.disconnected {
            closing.push(TraceEvent::new(EventKind::Disconnect, comm.members[0], "intermediate").comm(id as u32));
        }
    }
    trace.record_tick(closing);

    let source_members: Vec<WorldMember> = layout
        .procs
        .iter()
        .filter(|p| p.group_id == GroupRef::Source)
        .map(|p| WorldMember {
            pid: p.pid,
            group: GroupRef::Source,
            local_rank: p.local_rank,
            node: p.node,
            rank: u64::from(p.local_rank),
        })
        .collect();
    let link = connect_sources(&spawned, &source_members, &world.ports, &mut trace)?;

    let mut processes = world.snapshot(&layout);
    let final_world = match request.method {
        ResizeMethod::Merge => {
            let mut all = MergedWorld { members: source_members, group_id: 0 };
            all.members.extend(spawned.members);
            reorder_ranks(&all, &alloc, &schedule)
        }
        ResizeMethod::Baseline => {
            let mut order: Vec<Pid> =
                processes.iter().filter(|p| p.group_id == GroupRef::Source).map(|p| p.pid).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
            trace.record_tick(
                order.iter().map(|&pid| TraceEvent::new(EventKind::Terminate, pid, "source exits")),
            );
            spawned
        }
    };
    for p in &mut processes {
        p.phase = match (p.group_id, request.method) {
            (GroupRef::Source, ResizeMethod::Baseline) => Phase::Terminated,
            _ => Phase::Reordered,
        };
    }
    Ok(SimOutcome { world: final_world, trace, link, rounds, processes, schedule: Some(schedule) })
}

fn merge_shrink(cluster: &ClusterConfig, a: &[u32], nt: u64, seed: u64) -> Result<SimOutcome, SimError> {
    let plan = shrink_from_layout(cluster, a, nt)?;
    let nodes = source_nodes(a);
    let survivors: std::collections::BTreeSet<u64> =
        plan.survivors.iter().map(|s| s.previous_rank).collect();

    let mut trace = SimTrace::default();
    trace.record_tick([TraceEvent::new(EventKind::Split, 0, format!("{nt} survivors keep ranks"))]);
    let mut leaving: Vec<Pid> = (0..nodes.len() as u64)
        .filter(|r| !survivors.contains(r))
        .map(|r| r as Pid)
        .collect();
    leaving.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for pid in leaving {
        trace.record_tick([TraceEvent::new(
            EventKind::Terminate,
            pid,
            format!("node {}", nodes[pid as usize]),
        )]);
    }

    let world = MergedWorld {
        members: plan
            .survivors
            .iter()
            .map(|s| WorldMember {
                pid: s.previous_rank as Pid,
                group: GroupRef::Source,
                local_rank: s.previous_rank as u32,
                node: s.node,
                rank: s.rank,
            })
            .collect(),
        group_id: 0,
    };
    let processes = nodes
        .iter()
        .enumerate()
        .map(|(rank, &node)| SimProcess {
            pid: rank as Pid,
            group_id: GroupRef::Source,
            local_rank: rank as u32,
            node,
            is_group_root: rank == 0,
            has_children: false,
            children: Vec::new(),
            phase: if survivors.contains(&(rank as u64)) { Phase::Reordered } else { Phase::Terminated },
        })
        .collect();
    Ok(SimOutcome { world, trace, link: SourceLink::NoOp, rounds: 0, processes, schedule: None })
}
