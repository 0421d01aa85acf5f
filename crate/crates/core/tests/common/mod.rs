//! Independent reference implementations used as test oracles. None of them
//! call into the planner or simulator.

#![allow(dead_code)]

use espsim::cluster::{AllocationVectors, ClusterConfig};
use proptest::prelude::*;

/// Step-by-step growth of a homogeneous hypercube expansion, counting one
/// new node per existing process. Returns `(nodes, processes)` per step,
/// step 0 included, until at least `target` nodes are occupied.
pub fn brute_hypercube(initial: u64, cores: u64, target: u64) -> Vec<(u64, u64)> {
    let mut nodes = initial;
    let mut out = vec![(nodes, nodes * cores)];
    while nodes < target {
        let spawners = nodes * cores;
        let mut added = 0;
        for _ in 0..spawners {
            added += 1;
        }
        nodes += added;
        out.push((nodes, nodes * cores));
    }
    out
}

/// Per-step `(processes, generated, new nodes, occupied nodes)` of the
/// diffusive expansion, simulated by handing each existing process the next
/// unfilled target node.
pub fn diffusive_growth(m: &[u32], a: &[u32], s: &[i64]) -> Vec<(u64, u64, u64, u64)> {
    let mut pending: std::collections::VecDeque<u64> =
        s.iter().filter(|&&x| x > 0).map(|&x| x as u64).collect();
    assert_eq!(m.len(), a.len());
    let mut procs: u64 = a.iter().map(|&x| u64::from(x)).sum();
    let mut nodes = a.iter().filter(|&&x| x > 0).count() as u64;
    let mut out = vec![(procs, 0, 0, nodes)];
    while !pending.is_empty() && procs > 0 {
        let mut generated = 0;
        let mut taken = 0;
        for _ in 0..procs {
            match pending.pop_front() {
                Some(size) => {
                    generated += size;
                    taken += 1;
                }
                None => break,
            }
        }
        procs += generated;
        nodes += taken;
        out.push((procs, generated, taken, nodes));
    }
    out
}

/// Rounds needed to halve `groups` down to one, rounding up.
pub fn halving_rounds(mut groups: u64) -> u32 {
    let mut rounds = 0;
    while groups > 1 {
        groups = groups.div_ceil(2);
        rounds += 1;
    }
    rounds
}

/// Nodes listed once per process they host, sources first, filled in node
/// order. This is the rank-to-node map a reordered world must have when
/// sources are packed onto the first nodes.
pub fn expected_nodes_by_rank(alloc: &AllocationVectors) -> Vec<usize> {
    let mut out = Vec::new();
    for (node, &count) in alloc.a.iter().enumerate() {
        out.extend(std::iter::repeat_n(node, count as usize));
    }
    for (node, &count) in alloc.s.iter().enumerate() {
        if count > 0 {
            out.extend(std::iter::repeat_n(node, count as usize));
        }
    }
    out
}

/// Processes filling `count` cores of `cores`, lowest node first.
pub fn fill(cores: &[u32], mut count: u64) -> Vec<u32> {
    cores
        .iter()
        .map(|&c| {
            let take = count.min(u64::from(c));
            count -= take;
            take as u32
        })
        .collect()
}

/// A heterogeneous cluster and a valid expansion `(ns, nt)` on it.
pub fn expansion_case(max_nodes: usize, max_cores: u32) -> impl Strategy<Value = (ClusterConfig, u64, u64)> {
    prop::collection::vec(1..=max_cores, 2..=max_nodes).prop_flat_map(|cores| {
        let capacity: u64 = cores.iter().map(|&c| u64::from(c)).sum();
        (Just(cores), 1..capacity).prop_flat_map(move |(cores, ns)| {
            (Just(cores), Just(ns), (ns + 1)..=capacity)
        })
    })
    .prop_map(|(cores, ns, nt)| (ClusterConfig::from_cores(&cores), ns, nt))
}

/// A cluster and a valid shrink `(ns, nt)` on it.
pub fn shrink_case(max_nodes: usize, max_cores: u32) -> impl Strategy<Value = (ClusterConfig, u64, u64)> {
    expansion_case(max_nodes, max_cores).prop_map(|(cluster, small, large)| (cluster, large, small))
}
