use crate::planner::GroupRef;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Write};

pub type Pid = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Spawn,
    Open,
    Publish,
    Lookup,
    Send,
    Recv,
    Barrier,
    Split,
    Accept,
    Connect,
    Merge,
    Disconnect,
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: u64,
    pub kind: EventKind,
    pub actor: Pid,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<Pid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<GroupRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm: Option<u32>,
}

impl TraceEvent {
    pub fn new(kind: EventKind, actor: Pid, detail: impl Into<String>) -> Self {
        Self {
            time: 0,
            kind,
            actor,
            detail: detail.into(),
            peer: None,
            port: None,
            round: None,
            comm: None,
        }
    }

    pub fn peer(mut self, peer: Pid) -> Self {
        self.peer = Some(peer);
        self
    }

    pub fn port(mut self, port: GroupRef) -> Self {
        self.port = Some(port);
        self
    }

    pub fn round(mut self, round: u32) -> Self {
        self.round = Some(round);
        self
    }

    pub fn comm(mut self, comm: u32) -> Self {
        self.comm = Some(comm);
        self
    }
}

/// Ordered event log of one simulation run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    pub fn now(&self) -> u64 {
        self.events.last().map_or(0, |e| e.time)
    }

    /// Appends events stamped with the next tick.
    pub fn record_tick(&mut self, events: impl IntoIterator<Item = TraceEvent>) {
        let tick = self.events.last().map_or(0, |e| e.time + 1);
        self.record_at(tick, events);
    }

    pub fn record_at(&mut self, tick: u64, events: impl IntoIterator<Item = TraceEvent>) {
        for mut e in events {
            e.time = tick;
            self.events.push(e);
        }
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Highest binary-connection round seen in the trace.
    pub fn rounds(&self) -> u32 {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Accept | EventKind::Connect))
            .filter_map(|e| e.round)
            .max()
            .unwrap_or(0)
    }

    /// Checks tick monotonicity and that every receive consumes an earlier
    /// send on the same (sender, receiver) pair.
    pub fn check_well_formed(&self) -> Result<(), String> {
        let mut last = 0;
        let mut in_flight: BTreeMap<(Pid, Pid), i64> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            if e.time < last {
                return Err(format!("event {i} goes back in time ({} < {last})", e.time));
            }
            last = e.time;
            match e.kind {
                EventKind::Send => {
                    let peer = e.peer.ok_or_else(|| format!("send {i} has no receiver"))?;
                    *in_flight.entry((e.actor, peer)).or_default() += 1;
                }
                EventKind::Recv => {
                    let peer = e.peer.ok_or_else(|| format!("recv {i} has no sender"))?;
                    let pending = in_flight.entry((peer, e.actor)).or_default();
                    if *pending == 0 {
                        return Err(format!("recv {i} by {} from {peer} has no matching send", e.actor));
                    }
                    *pending -= 1;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks that every connect against a port comes after that port was
    /// opened and published.
    pub fn check_port_safety(&self) -> Result<(), String> {
        let mut opened = std::collections::BTreeSet::new();
        let mut published = std::collections::BTreeSet::new();
        for (i, e) in self.events.iter().enumerate() {
            match (e.kind, e.port) {
                (EventKind::Open, Some(p)) => {
                    opened.insert(p);
                }
                (EventKind::Publish, Some(p)) => {
                    published.insert(p);
                }
                (EventKind::Connect, Some(p)) if !opened.contains(&p) || !published.contains(&p) => {
                    return Err(format!("connect {i} to port {p} before it was opened"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn write_json_lines<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
