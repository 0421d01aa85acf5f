use super::engine::Layout;
use super::ports::PortRegistry;
use super::trace::{EventKind, Pid, SimTrace, TraceEvent};
use super::SimError;
use crate::cluster::AllocationVectors;
use crate::planner::{GroupRef, SpawnSchedule};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldMember {
    pub pid: Pid,
    pub group: GroupRef,
    /// Rank inside the group the process was created in.
    pub local_rank: u32,
    pub node: usize,
    pub rank: u64,
}

/// A single communicator holding every connected process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedWorld {
    pub members: Vec<WorldMember>,
    pub group_id: u32,
}

impl MergedWorld {
    /// World whose ranks follow the order of `pids`.
    pub fn from_pids(layout: &Layout, pids: &[Pid]) -> Self {
        let members = pids
            .iter()
            .enumerate()
            .map(|(rank, &pid)| {
                let p = &layout.procs[pid as usize];
                WorldMember {
                    pid,
                    group: p.group_id,
                    local_rank: p.local_rank,
                    node: p.node,
                    rank: rank as u64,
                }
            })
            .collect();
        Self { members, group_id: 0 }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn spawned_len(&self) -> usize {
        self.members.iter().filter(|m| m.group != GroupRef::Source).count()
    }

    pub fn is_permutation(&self) -> bool {
        let mut ranks: Vec<u64> = self.members.iter().map(|m| m.rank).collect();
        ranks.sort_unstable();
        ranks.iter().enumerate().all(|(i, &r)| r == i as u64)
    }

    /// `(pid, rank, node)` sorted by pid; comparable across runs.
    pub fn mapping(&self) -> Vec<(Pid, u64, usize)> {
        let mut out: Vec<_> = self.members.iter().map(|m| (m.pid, m.rank, m.node)).collect();
        out.sort_unstable();
        out
    }

    pub fn by_rank(&self) -> Vec<&WorldMember> {
        let mut out: Vec<_> = self.members.iter().collect();
        out.sort_by_key(|m| m.rank);
        out
    }

    pub fn root(&self) -> Option<&WorldMember> {
        self.members.iter().min_by_key(|m| m.rank)
    }
}

/// Offset of each spawned group's first rank: the source count plus the
/// sizes of all groups placed on earlier compacted targets.
fn group_offsets(alloc: &AllocationVectors, schedule: &SpawnSchedule) -> BTreeMap<u32, u64> {
    let sources = alloc.sources();
    let mut prefix = BTreeMap::new();
    let mut acc = 0u64;
    for (node, size) in alloc.compacted_targets() {
        prefix.insert(node, acc);
        acc += u64::from(size);
    }
    schedule
        .events
        .iter()
        .map(|e| (e.child_group, sources + prefix.get(&e.target_node).copied().unwrap_or(0)))
        .collect()
}

/// Sort key each process hands to the final split: its rank inside its
/// original group, shifted past all sources and all earlier groups. Sources
/// keep their own rank.
pub fn reorder_key(member: &WorldMember, offsets: &BTreeMap<u32, u64>) -> u64 {
    match member.group {
        GroupRef::Source => u64::from(member.local_rank),
        GroupRef::Group(g) => u64::from(member.local_rank) + offsets.get(&g).copied().unwrap_or(0),
    }
}

/// Re-ranks a merged world by the split key; ranks become 0-based positions
/// in key order.
pub fn reorder_ranks(
    world: &MergedWorld,
    alloc: &AllocationVectors,
    schedule: &SpawnSchedule,
) -> MergedWorld {
    let offsets = group_offsets(alloc, schedule);
    let mut keyed: Vec<(u64, &WorldMember)> =
        world.members.iter().map(|m| (reorder_key(m, &offsets), m)).collect();
    keyed.sort_by_key(|&(key, m)| (key, m.pid));
    let members = keyed
        .into_iter()
        .enumerate()
        .map(|(rank, (_, m))| WorldMember { rank: rank as u64, ..m.clone() })
        .collect();
    MergedWorld { members, group_id: 0 }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceLink {
    Linked { source_root: Pid, target_root: Pid, sources: usize, targets: usize },
    NoOp,
}

/// Final accept/connect between the source group and the merged targets.
pub fn connect_sources(
    world: &MergedWorld,
    sources: &[WorldMember],
    ports: &PortRegistry,
    trace: &mut SimTrace,
) -> Result<SourceLink, SimError> {
    let (Some(target_root), Some(source_root)) = (
        world.root().filter(|_| world.spawned_len() > 0),
        sources.iter().min_by_key(|m| m.local_rank),
    ) else {
        return Ok(SourceLink::NoOp);
    };
    let port = GroupRef::Source;
    trace.record_tick([
        TraceEvent::new(EventKind::Lookup, target_root.pid, PortRegistry::service_name(port)).port(port)
    ]);
    if ports.lookup(port).is_none() {
        return Err(SimError::PortFault { port, actor: target_root.pid });
    }
    trace.record_tick([
        TraceEvent::new(EventKind::Connect, target_root.pid, "connect to sources").port(port),
    ]);
    trace.record_tick([TraceEvent::new(EventKind::Accept, source_root.pid, "accept targets")
        .peer(target_root.pid)
        .port(port)]);
    Ok(SourceLink::Linked {
        source_root: source_root.pid,
        target_root: target_root.pid,
        sources: sources.len(),
        targets: world.len(),
    })
}
