//! Message-level state machine for the spawn, synchronization and binary
//! connection protocol.
//!
//! [`World`] holds only the dynamic state of a run and is `Clone + Hash`, so
//! the same machine drives both seeded random runs and exhaustive
//! exploration. Static facts (who spawns whom, group membership) live in
//! [`Layout`]. Each [`Action`] is one atomic step; the caller decides which
//! enabled action fires next.

use super::ports::PortRegistry;
use super::trace::{EventKind, Pid, TraceEvent};
use super::SimError;
use crate::planner::{GroupRef, SpawnSchedule};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub type CommId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Spawned,
    SyncUp,
    SyncDown,
    Connecting,
    Merged,
    Reordered,
    Terminated,
}

/// Static description of one simulated process plus its current phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimProcess {
    pub pid: Pid,
    pub group_id: GroupRef,
    pub local_rank: u32,
    pub node: usize,
    pub is_group_root: bool,
    pub has_children: bool,
    pub children: Vec<u32>,
    pub phase: Phase,
}

/// How an accepting group picks among pending connections on its port.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PortMatching {
    /// Accept only the connection issued for the same binary round.
    #[default]
    ByRound,
    /// Accept whichever connection reached the port first.
    Fifo,
}

/// Which protocol stages a run includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    /// Groups start dead and come alive when their parent spawns them.
    pub spawn: bool,
    pub sync: bool,
    pub binary: bool,
    /// The source root opens a port for the final source-target link.
    pub source_port: bool,
    /// Accepting ports are opened and published before the run starts.
    pub preopen: bool,
    pub matching: PortMatching,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub procs: Vec<SimProcess>,
    parent: Vec<Option<Pid>>,
    /// Per process: (child group, child root pid) in spawn order.
    spawns: Vec<Vec<(u32, Pid)>>,
    pub members: BTreeMap<GroupRef, Vec<Pid>>,
    pub group_count: u32,
    pub acceptors: BTreeSet<u32>,
    world_comm: BTreeMap<GroupRef, CommId>,
    pub stages: Stages,
}

/// Groups that execute an accept in at least one binary round.
pub fn acceptors(groups: u32) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for start in 0..groups {
        let (mut active, gid) = (groups, start);
        while active > 1 {
            let middle = active / 2;
            let next = active.div_ceil(2);
            if gid < middle {
                out.insert(start);
                break;
            } else if gid >= next {
                // merged into the accepting side
                break;
            }
            active = next;
        }
    }
    out
}

impl Layout {
    /// Sources on `source_nodes` (one entry per source rank) growing per
    /// `schedule`.
    pub fn from_schedule(source_nodes: &[usize], schedule: &SpawnSchedule, stages: Stages) -> Self {
        let groups: Vec<(u32, usize)> =
            schedule.by_group().iter().map(|e| (e.size, e.target_node)).collect();
        let mut layout = Self::build(source_nodes, &groups, stages);

        for e in schedule.by_group() {
            let parent = *layout.members[&e.parent_group]
                .get(e.parent_local_rank as usize)
                .expect("schedule parent rank outside its group");
            let root = layout.members[&GroupRef::Group(e.child_group)][0];
            layout.parent[root as usize] = Some(parent);
            layout.spawns[parent as usize].push((e.child_group, root));
        }
        // by_group order is creation order within a step; re-sort by step
        for (pid, list) in layout.spawns.iter_mut().enumerate() {
            list.sort_by_key(|&(g, _)| schedule.event_for(g).map(|e| e.step).unwrap_or(0));
            let p = &mut layout.procs[pid];
            p.children = list.iter().map(|&(g, _)| g).collect();
            p.has_children = !p.children.is_empty();
        }
        layout
    }

    /// Already-running groups with no sources and no spawn tree.
    pub fn groups_only(sizes: &[u32], stages: Stages) -> Self {
        let groups: Vec<(u32, usize)> = sizes.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Self::build(&[], &groups, stages)
    }

    fn build(source_nodes: &[usize], groups: &[(u32, usize)], stages: Stages) -> Self {
        let mut procs = Vec::new();
        let mut members: BTreeMap<GroupRef, Vec<Pid>> = BTreeMap::new();
        let mut push = |group: GroupRef, rank: u32, node: usize, procs: &mut Vec<SimProcess>| {
            let pid = procs.len() as Pid;
            procs.push(SimProcess {
                pid,
                group_id: group,
                local_rank: rank,
                node,
                is_group_root: rank == 0,
                has_children: false,
                children: Vec::new(),
                phase: Phase::Spawned,
            });
            members.entry(group).or_default().push(pid);
        };
        for (rank, &node) in source_nodes.iter().enumerate() {
            push(GroupRef::Source, rank as u32, node, &mut procs);
        }
        for (g, &(size, node)) in groups.iter().enumerate() {
            for rank in 0..size {
                push(GroupRef::Group(g as u32), rank, node, &mut procs);
            }
        }
        let world_comm = members.keys().enumerate().map(|(i, &g)| (g, i as CommId)).collect();
        let n = procs.len();
        let group_count = groups.len() as u32;
        Self {
            procs,
            parent: vec![None; n],
            spawns: vec![Vec::new(); n],
            members,
            group_count,
            acceptors: acceptors(group_count),
            world_comm,
            stages,
        }
    }

    pub fn root(&self, group: GroupRef) -> Option<Pid> {
        self.members.get(&group).and_then(|m| m.first().copied())
    }

    fn needs_port(&self, group: GroupRef) -> bool {
        match group {
            GroupRef::Source => self.stages.source_port,
            GroupRef::Group(g) => self.acceptors.contains(&g),
        }
    }

    /// Whether the process joins the synchronization subcommunicator.
    fn in_sync_comm(&self, pid: Pid) -> bool {
        let p = &self.procs[pid as usize];
        p.is_group_root || p.has_children
    }

    fn program(&self, pid: Pid) -> VecDeque<Op> {
        let p = &self.procs[pid as usize];
        let mut ops = VecDeque::new();
        if self.stages.spawn {
            ops.extend(self.spawns[pid as usize].iter().map(|&(g, _)| Op::Spawn(g)));
        }
        if p.is_group_root && self.needs_port(p.group_id) && !self.stages.preopen {
            ops.push_back(Op::Open);
            ops.push_back(Op::Publish);
        }
        let is_source = p.group_id == GroupRef::Source;
        if self.stages.sync {
            let member = self.in_sync_comm(pid);
            ops.push_back(Op::Split);
            ops.push_back(Op::Phase(Phase::SyncUp));
            if p.has_children {
                let roots = self.spawns[pid as usize].iter().map(|&(_, r)| r).collect();
                ops.push_back(Op::Recv(roots));
            }
            if member {
                ops.push_back(Op::Barrier);
            }
            if p.is_group_root && !is_source {
                let parent = self.parent[pid as usize].expect("spawned root without parent");
                ops.push_back(Op::Send(parent));
                ops.push_back(Op::Phase(Phase::SyncDown));
                ops.push_back(Op::Recv(BTreeSet::from([parent])));
            } else {
                ops.push_back(Op::Phase(Phase::SyncDown));
            }
            if member && !is_source {
                ops.push_back(Op::Barrier);
            }
            for &(_, root) in &self.spawns[pid as usize] {
                ops.push_back(Op::Send(root));
            }
            if member {
                ops.push_back(Op::DisconnectSub);
            }
        }
        ops.push_back(Op::Phase(Phase::Connecting));
        if self.stages.binary && !is_source {
            ops.push_back(Op::Bin);
        }
        ops
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Op {
    Spawn(u32),
    Open,
    Publish,
    Split,
    /// Irecv from each listed process followed by Waitall.
    Recv(BTreeSet<Pid>),
    Send(Pid),
    Barrier,
    DisconnectSub,
    Phase(Phase),
    Bin,
    Accept { port: u32, round: u32 },
    Connect { port: u32, round: u32 },
    AwaitMatch,
    MergeInter(CommId),
}

impl Op {
    /// Identity used to check that all members of a communicator enter the
    /// same collective.
    fn collective_key(&self) -> Option<(u8, u32)> {
        match *self {
            Op::Split => Some((0, 0)),
            Op::Barrier => Some((1, 0)),
            Op::DisconnectSub => Some((2, 0)),
            Op::Accept { port, .. } => Some((3, port)),
            Op::Connect { port, .. } => Some((4, port)),
            Op::MergeInter(c) => Some((5, c)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommKind {
    World,
    Sync,
    Inter,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Comm {
    pub members: Vec<Pid>,
    pub kind: CommKind,
    pub disconnected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct BinState {
    groups: u32,
    gid: u32,
    round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ProcState {
    alive: bool,
    phase: Phase,
    ops: VecDeque<Op>,
    arrived: bool,
    sub: Option<CommId>,
    comm: CommId,
    bin: Option<BinState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct ConnectRequest {
    comm: CommId,
    root: Pid,
    round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Step(Pid),
    Recv { to: Pid, from: Pid },
    Match(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct World {
    procs: Vec<ProcState>,
    comms: Vec<Comm>,
    /// Undelivered tokens per (sender, receiver). Tokens on one directed
    /// pair are indistinguishable, so a count preserves FIFO order.
    channels: BTreeMap<(Pid, Pid), u32>,
    arrivals: BTreeMap<CommId, ((u8, u32), BTreeSet<Pid>)>,
    pub ports: PortRegistry,
    connects: BTreeMap<u32, VecDeque<ConnectRequest>>,
    accepting: BTreeMap<u32, (CommId, u32)>,
    matching: PortMatching,
}

impl World {
    /// Initial state plus the events emitted during setup.
    pub fn new(layout: &Layout) -> (Self, Vec<TraceEvent>) {
        let comms = layout
            .members
            .values()
            .map(|m| Comm { members: m.clone(), kind: CommKind::World, disconnected: false })
            .collect();
        let procs = layout
            .procs
            .iter()
            .map(|p| ProcState {
                alive: !layout.stages.spawn || p.group_id == GroupRef::Source,
                phase: Phase::Spawned,
                ops: layout.program(p.pid),
                arrived: false,
                sub: None,
                comm: layout.world_comm[&p.group_id],
                bin: p.group_id.id().map(|gid| BinState {
                    groups: layout.group_count,
                    gid,
                    round: 0,
                }),
            })
            .collect();
        let mut world = Self {
            procs,
            comms,
            channels: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            ports: PortRegistry::default(),
            connects: BTreeMap::new(),
            accepting: BTreeMap::new(),
            matching: layout.stages.matching,
        };
        let mut events = Vec::new();
        if layout.stages.preopen {
            for (&group, members) in &layout.members {
                if layout.needs_port(group) {
                    world.ports.open(group);
                    world.ports.publish(group);
                    events.push(TraceEvent::new(EventKind::Open, members[0], "open port").port(group));
                    events.push(
                        TraceEvent::new(EventKind::Publish, members[0], PortRegistry::service_name(group))
                            .port(group),
                    );
                }
            }
        }
        for pid in 0..world.procs.len() as Pid {
            if world.procs[pid as usize].alive {
                world.settle(pid);
            }
        }
        (world, events)
    }

    pub fn comms(&self) -> &[Comm] {
        &self.comms
    }

    pub fn is_complete(&self) -> bool {
        self.procs.iter().all(|p| p.alive && p.ops.is_empty())
    }

    pub fn comm_of(&self, pid: Pid) -> CommId {
        self.procs[pid as usize].comm
    }

    pub fn snapshot(&self, layout: &Layout) -> Vec<SimProcess> {
        layout
            .procs
            .iter()
            .zip(&self.procs)
            .map(|(p, s)| SimProcess { phase: s.phase, ..p.clone() })
            .collect()
    }

    /// Human-readable list of processes that still have work left.
    pub fn blocked(&self) -> Vec<String> {
        self.procs
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.ops.is_empty() || !p.alive)
            .map(|(pid, p)| match p.ops.front() {
                _ if !p.alive => format!("pid {pid}: never spawned"),
                Some(op) => format!("pid {pid}: blocked in {op:?}"),
                None => format!("pid {pid}: idle"),
            })
            .collect()
    }

    pub fn enabled(&self) -> Vec<Action> {
        let mut out = Vec::new();
        for (pid, p) in self.procs.iter().enumerate() {
            let pid = pid as Pid;
            if !p.alive {
                continue;
            }
            match p.ops.front() {
                None | Some(Op::AwaitMatch) => {}
                Some(Op::Recv(from)) => {
                    for &f in from {
                        if self.channels.get(&(f, pid)).copied().unwrap_or(0) > 0 {
                            out.push(Action::Recv { to: pid, from: f });
                        }
                    }
                }
                Some(op) if op.collective_key().is_some() => {
                    if !p.arrived {
                        out.push(Action::Step(pid));
                    }
                }
                Some(_) => out.push(Action::Step(pid)),
            }
        }
        for (&port, &(_, round)) in &self.accepting {
            if self.match_candidate(port, round).is_some() {
                out.push(Action::Match(port));
            }
        }
        out
    }

    fn match_candidate(&self, port: u32, round: u32) -> Option<usize> {
        let queue = self.connects.get(&port)?;
        match self.matching {
            _ if queue.is_empty() => None,
            PortMatching::Fifo => Some(0),
            PortMatching::ByRound => queue.iter().position(|r| r.round == round),
        }
    }

    pub fn apply(
        &mut self,
        layout: &Layout,
        action: Action,
        out: &mut Vec<TraceEvent>,
    ) -> Result<(), SimError> {
        match action {
            Action::Step(pid) => self.step(layout, pid, out),
            Action::Recv { to, from } => {
                let slot = self.channels.get_mut(&(from, to)).expect("recv without token");
                *slot -= 1;
                if *slot == 0 {
                    self.channels.remove(&(from, to));
                }
                out.push(TraceEvent::new(EventKind::Recv, to, "token").peer(from));
                let state = &mut self.procs[to as usize];
                if let Some(Op::Recv(from_set)) = state.ops.front_mut() {
                    from_set.remove(&from);
                    if from_set.is_empty() {
                        state.ops.pop_front();
                        self.settle(to);
                    }
                }
                Ok(())
            }
            Action::Match(port) => {
                self.match_port(port, out);
                Ok(())
            }
        }
    }

    fn step(&mut self, layout: &Layout, pid: Pid, out: &mut Vec<TraceEvent>) -> Result<(), SimError> {
        let op = self.procs[pid as usize].ops.front().cloned().expect("step on idle process");
        let group = layout.procs[pid as usize].group_id;
        match op {
            Op::Spawn(g) => {
                let child = GroupRef::Group(g);
                let members = &layout.members[&child];
                let node = layout.procs[members[0] as usize].node;
                out.push(
                    TraceEvent::new(
                        EventKind::Spawn,
                        pid,
                        format!("group {g}: {} processes on node {node}", members.len()),
                    )
                    .peer(members[0]),
                );
                self.pop(pid);
                for &m in members {
                    self.procs[m as usize].alive = true;
                    self.settle(m);
                }
            }
            Op::Open => {
                self.ports.open(group);
                out.push(TraceEvent::new(EventKind::Open, pid, "open port").port(group));
                self.pop(pid);
            }
            Op::Publish => {
                self.ports.publish(group);
                out.push(
                    TraceEvent::new(EventKind::Publish, pid, PortRegistry::service_name(group)).port(group),
                );
                self.pop(pid);
            }
            Op::Send(to) => {
                *self.channels.entry((pid, to)).or_default() += 1;
                out.push(TraceEvent::new(EventKind::Send, pid, "token").peer(to));
                self.pop(pid);
            }
            ref collective => {
                let key = collective.collective_key().expect("non-collective op in step");
                let comm = match collective {
                    Op::Split => layout.world_comm[&group],
                    Op::Barrier | Op::DisconnectSub => {
                        self.procs[pid as usize].sub.expect("sync op outside subcommunicator")
                    }
                    Op::MergeInter(inter) => *inter,
                    _ => self.procs[pid as usize].comm,
                };
                if let Op::Connect { port, round } = *collective {
                    if self.comms[comm as usize].members[0] == pid {
                        let target = GroupRef::Group(port);
                        out.push(
                            TraceEvent::new(EventKind::Lookup, pid, PortRegistry::service_name(target))
                                .port(target),
                        );
                        if self.ports.lookup(target).is_none() {
                            return Err(SimError::PortFault { port: target, actor: pid });
                        }
                        out.push(
                            TraceEvent::new(EventKind::Connect, pid, format!("connect to group {port}"))
                                .port(target)
                                .round(round),
                        );
                    }
                }
                self.arrive(layout, pid, comm, key, out)?;
            }
        }
        Ok(())
    }

    fn arrive(
        &mut self,
        layout: &Layout,
        pid: Pid,
        comm: CommId,
        key: (u8, u32),
        out: &mut Vec<TraceEvent>,
    ) -> Result<(), SimError> {
        let entry = self.arrivals.entry(comm).or_insert_with(|| (key, BTreeSet::new()));
        if entry.0 != key {
            return Err(SimError::ProtocolFault(format!(
                "pid {pid} entered a different collective than its peers on communicator {comm}"
            )));
        }
        entry.1.insert(pid);
        self.procs[pid as usize].arrived = true;
        if entry.1.len() < self.comms[comm as usize].members.len() {
            return Ok(());
        }
        self.arrivals.remove(&comm);
        let members = self.comms[comm as usize].members.clone();
        for &m in &members {
            self.procs[m as usize].arrived = false;
        }
        let root = members[0];
        let op = self.procs[root as usize].ops.front().cloned().expect("collective without op");
        match op {
            Op::Split => {
                let sub: Vec<Pid> = members.iter().copied().filter(|&m| layout.in_sync_comm(m)).collect();
                let id = self.new_comm(sub.clone(), CommKind::Sync);
                out.push(TraceEvent::new(EventKind::Split, root, "sync subcommunicator").comm(id));
                for &m in &sub {
                    self.procs[m as usize].sub = Some(id);
                }
                self.pop_all(&members);
            }
            Op::Barrier => {
                out.push(TraceEvent::new(EventKind::Barrier, root, "sync barrier").comm(comm));
                self.pop_all(&members);
            }
            Op::DisconnectSub => {
                self.comms[comm as usize].disconnected = true;
                out.push(TraceEvent::new(EventKind::Disconnect, root, "sync subcommunicator").comm(comm));
                for &m in &members {
                    self.procs[m as usize].sub = None;
                }
                self.pop_all(&members);
            }
            Op::Accept { port, round } => {
                self.accepting.insert(port, (comm, round));
                self.await_match(&members);
            }
            Op::Connect { port, round } => {
                self.connects.entry(port).or_default().push_back(ConnectRequest { comm, root, round });
                self.await_match(&members);
            }
            Op::MergeInter(_) => {
                let id = self.new_comm(members.clone(), CommKind::Merged);
                out.push(
                    TraceEvent::new(EventKind::Merge, root, format!("{} processes", members.len()))
                        .comm(id),
                );
                for &m in &members {
                    self.procs[m as usize].comm = id;
                }
                self.pop_all(&members);
            }
            other => unreachable!("{other:?} is not collective"),
        }
        Ok(())
    }

    fn match_port(&mut self, port: u32, out: &mut Vec<TraceEvent>) {
        let (accept_comm, round) = self.accepting.remove(&port).expect("match without acceptor");
        let idx = self.match_candidate(port, round).expect("match without connection");
        let request = self.connects.get_mut(&port).and_then(|q| q.remove(idx)).expect("queue entry");
        let mut members = self.comms[accept_comm as usize].members.clone();
        members.extend_from_slice(&self.comms[request.comm as usize].members);
        let inter = self.new_comm(members.clone(), CommKind::Inter);
        out.push(
            TraceEvent::new(EventKind::Accept, members[0], format!("accept on port {port}"))
                .peer(request.root)
                .port(GroupRef::Group(port))
                .round(round)
                .comm(inter),
        );
        for &m in &members {
            let front = self.procs[m as usize].ops.front_mut().expect("matched process idle");
            debug_assert_eq!(*front, Op::AwaitMatch);
            *front = Op::MergeInter(inter);
        }
    }

    fn await_match(&mut self, members: &[Pid]) {
        for &m in members {
            if let Some(front) = self.procs[m as usize].ops.front_mut() {
                *front = Op::AwaitMatch;
            }
        }
    }

    fn new_comm(&mut self, members: Vec<Pid>, kind: CommKind) -> CommId {
        self.comms.push(Comm { members, kind, disconnected: false });
        (self.comms.len() - 1) as CommId
    }

    fn pop(&mut self, pid: Pid) {
        self.procs[pid as usize].ops.pop_front();
        self.settle(pid);
    }

    fn pop_all(&mut self, members: &[Pid]) {
        for &m in members {
            self.pop(m);
        }
    }

    /// Runs local bookkeeping ops (phase changes, binary round expansion)
    /// until the process reaches an op that needs an action.
    fn settle(&mut self, pid: Pid) {
        let state = &mut self.procs[pid as usize];
        loop {
            match state.ops.front() {
                Some(Op::Phase(phase)) => {
                    state.phase = *phase;
                    state.ops.pop_front();
                }
                Some(Op::Bin) => {
                    state.ops.pop_front();
                    let b = state.bin.expect("binary connection without group id");
                    if b.groups <= 1 {
                        state.phase = Phase::Merged;
                        continue;
                    }
                    let middle = b.groups / 2;
                    let next = b.groups.div_ceil(2);
                    let round = b.round + 1;
                    let mut gid = b.gid;
                    state.ops.push_front(Op::Bin);
                    if b.gid < middle {
                        state.ops.push_front(Op::Accept { port: b.gid, round });
                    } else if b.gid >= next {
                        gid = b.groups - b.gid - 1;
                        state.ops.push_front(Op::Connect { port: gid, round });
                    }
                    state.bin = Some(BinState { groups: next, gid, round });
                }
                _ => break,
            }
        }
    }
}
