//! Exhaustive interleaving search over the protocol state machine.
//!
//! Visits every reachable [`World`] state once (depth-first, deduplicated by
//! state hash) and classifies the states with no enabled action. Only
//! practical for small layouts.

use super::engine::{Layout, World};
use std::collections::HashSet;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Exploration {
    pub states: usize,
    pub completed: usize,
    pub deadlocks: usize,
    pub faults: usize,
    /// The state budget ran out before the search finished.
    pub truncated: bool,
}

impl Exploration {
    pub fn all_complete(&self) -> bool {
        !self.truncated && self.deadlocks == 0 && self.faults == 0 && self.completed > 0
    }
}

pub fn explore(layout: &Layout, max_states: usize) -> Exploration {
    let (start, _) = World::new(layout);
    let mut report = Exploration::default();
    let mut seen = HashSet::new();
    let mut stack = vec![start.clone()];
    seen.insert(start);
    let mut scratch = Vec::new();
    while let Some(world) = stack.pop() {
        report.states += 1;
        let actions = world.enabled();
        if actions.is_empty() {
            if world.is_complete() {
                report.completed += 1;
            } else {
                report.deadlocks += 1;
            }
            continue;
        }
        for action in actions {
            let mut next = world.clone();
            scratch.clear();
            if next.apply(layout, action, &mut scratch).is_err() {
                report.faults += 1;
                continue;
            }
            if seen.len() >= max_states {
                report.truncated = true;
                continue;
            }
            if seen.insert(next.clone()) {
                stack.push(next);
            }
        }
    }
    report
}
