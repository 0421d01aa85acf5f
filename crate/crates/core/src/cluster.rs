//! Machine description and allocation state before/after a reconfiguration.
//!
//! A [`ClusterConfig`] is the ordered list of nodes the job may use. Node order
//! is significant: it defines the global node index and the order in which
//! sources are packed and new processes are placed.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("cluster has no nodes")]
    EmptyCluster,
    #[error("node {node} ({name}) has zero cores")]
    ZeroCores { node: usize, name: String },
    #[error("process counts must be positive (ns={ns}, nt={nt})")]
    ZeroProcesses { ns: u64, nt: u64 },
    #[error("ns == nt == {0}: reconfiguration is a no-op")]
    NoOp(u64),
    #[error("requested {requested} processes but the cluster only offers {capacity} cores")]
    CapacityExceeded { requested: u64, capacity: u64 },
    #[error("hypercube strategy needs equal core counts on every node")]
    NotHomogeneous,
    #[error("{count} processes is not a multiple of {cores} cores per node")]
    NonDivisible { count: u64, cores: u32 },
    #[error("invalid shrink from {ns} to {nt} processes")]
    InvalidShrink { ns: u64, nt: u64 },
    #[error("vector {name} has {len} entries, cluster has {nodes} nodes")]
    LengthMismatch { name: &'static str, len: usize, nodes: usize },
    #[error("node {node}: {running} running processes exceed {cores} cores")]
    SourceOverflow { node: usize, running: u32, cores: u32 },
    #[error("explicit source layout holds {actual} processes, request says ns={expected}")]
    SourceCountMismatch { expected: u64, actual: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub cores: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeSpec>,
}

impl ClusterConfig {
    pub fn new(nodes: Vec<NodeSpec>) -> Result<Self, ClusterError> {
        let cluster = Self { nodes };
        cluster.validate()?;
        Ok(cluster)
    }

    /// `count` nodes named `node0..` with `cores` cores each.
    pub fn homogeneous(count: usize, cores: u32) -> Self {
        Self::from_cores(&vec![cores; count])
    }

    pub fn from_cores(cores: &[u32]) -> Self {
        Self {
            nodes: cores
                .iter()
                .enumerate()
                .map(|(i, &c)| NodeSpec { name: format!("node{i}"), cores: c })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.nodes.is_empty() {
            return Err(ClusterError::EmptyCluster);
        }
        if let Some((i, n)) = self.nodes.iter().enumerate().find(|(_, n)| n.cores == 0) {
            return Err(ClusterError::ZeroCores { node: i, name: n.name.clone() });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cores(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.cores).collect()
    }

    pub fn capacity(&self) -> u64 {
        self.nodes.iter().map(|n| u64::from(n.cores)).sum()
    }

    /// Core count shared by every node, if the cluster is homogeneous.
    pub fn uniform_cores(&self) -> Option<u32> {
        let first = self.nodes.first()?.cores;
        self.nodes.iter().all(|n| n.cores == first).then_some(first)
    }

    /// Total cores of the first `count` nodes.
    pub fn prefix_capacity(&self, count: usize) -> u64 {
        self.nodes.iter().take(count).map(|n| u64::from(n.cores)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(alias = "hypercube", alias = "HYPERCUBE")]
    Hypercube,
    #[serde(
        alias = "iterative_diffusive",
        alias = "iterative-diffusive",
        alias = "diffusive",
        alias = "Diffusive"
    )]
    IterativeDiffusive,
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "hypercube" => Ok(Self::Hypercube),
            "iterativediffusive" | "diffusive" => Ok(Self::IterativeDiffusive),
            other => Err(format!("unknown strategy '{other}'")),
        }
    }
}

/// How the job is resized: respawn everything, or keep sources and only
/// add/remove the difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResizeMethod {
    #[serde(alias = "baseline", alias = "BASELINE")]
    Baseline,
    #[serde(alias = "merge", alias = "MERGE")]
    Merge,
}

impl FromStr for ResizeMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::Baseline),
            "merge" => Ok(Self::Merge),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

impl fmt::Display for ResizeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Baseline => f.write_str("Baseline"),
            Self::Merge => f.write_str("Merge"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconfigRequest {
    pub ns: u64,
    pub nt: u64,
    pub strategy: Strategy,
    pub method: ResizeMethod,
}

impl ReconfigRequest {
    pub fn new(ns: u64, nt: u64, strategy: Strategy, method: ResizeMethod) -> Self {
        Self { ns, nt, strategy, method }
    }

    pub fn is_expansion(&self) -> bool {
        self.nt > self.ns
    }

    pub fn validate(&self, cluster: &ClusterConfig) -> Result<(), ClusterError> {
        cluster.validate()?;
        if self.ns == 0 || self.nt == 0 {
            return Err(ClusterError::ZeroProcesses { ns: self.ns, nt: self.nt });
        }
        if self.ns == self.nt {
            return Err(ClusterError::NoOp(self.ns));
        }
        let capacity = cluster.capacity();
        let largest = self.ns.max(self.nt);
        if largest > capacity {
            return Err(ClusterError::CapacityExceeded { requested: largest, capacity });
        }
        if self.strategy == Strategy::Hypercube {
            let cores = cluster.uniform_cores().ok_or(ClusterError::NotHomogeneous)?;
            for count in [self.ns, self.nt] {
                if count % u64::from(cores) != 0 {
                    return Err(ClusterError::NonDivisible { count, cores });
                }
            }
        }
        Ok(())
    }
}

/// The M/A/S description of a reconfiguration: per-node capacity, processes
/// already running, and processes to create (negative when terminating).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationVectors {
    #[serde(rename = "M")]
    pub m: Vec<u32>,
    #[serde(rename = "A")]
    pub a: Vec<u32>,
    #[serde(rename = "S")]
    pub s: Vec<i64>,
    /// Some node receives fewer new processes than its free cores.
    #[serde(default)]
    pub partial_fill: bool,
}

impl AllocationVectors {
    /// Builds vectors with `S_i = M_i - A_i` on every node.
    pub fn from_capacity(m: Vec<u32>, a: Vec<u32>) -> Result<Self, ClusterError> {
        check_sources(&m, &a)?;
        let s = m.iter().zip(&a).map(|(&m, &a)| i64::from(m) - i64::from(a)).collect();
        Ok(Self { m, a, s, partial_fill: false })
    }

    pub fn nodes(&self) -> usize {
        self.m.len()
    }

    pub fn sources(&self) -> u64 {
        self.a.iter().map(|&a| u64::from(a)).sum()
    }

    /// Number of processes created by the plan (sum of positive S entries).
    pub fn spawned(&self) -> u64 {
        self.s.iter().filter(|&&s| s > 0).map(|&s| s as u64).sum()
    }

    pub fn initial_nodes(&self) -> usize {
        self.a.iter().filter(|&&a| a > 0).count()
    }

    /// `(node, size)` for every positive S entry, in node order. Null entries
    /// are skipped, so position in this list is the compacted group index.
    pub fn compacted_targets(&self) -> Vec<(usize, u32)> {
        self.s
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0)
            .map(|(i, &s)| (i, s as u32))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let n = self.m.len();
        if n == 0 {
            return Err(ClusterError::EmptyCluster);
        }
        for (name, len) in [("A", self.a.len()), ("S", self.s.len())] {
            if len != n {
                return Err(ClusterError::LengthMismatch { name, len, nodes: n });
            }
        }
        check_sources(&self.m, &self.a)
    }
}

fn check_sources(m: &[u32], a: &[u32]) -> Result<(), ClusterError> {
    if a.len() != m.len() {
        return Err(ClusterError::LengthMismatch { name: "A", len: a.len(), nodes: m.len() });
    }
    for (i, (&m, &a)) in m.iter().zip(a).enumerate() {
        if a > m {
            return Err(ClusterError::SourceOverflow { node: i, running: a, cores: m });
        }
    }
    Ok(())
}

/// Fills `count` processes onto nodes in index order, each node up to its
/// capacity.
pub fn pack(capacity: &[u32], count: u64) -> Vec<u32> {
    let mut left = count;
    capacity
        .iter()
        .map(|&c| {
            let take = left.min(u64::from(c));
            left -= take;
            take as u32
        })
        .collect()
}

/// Allocation for `request` with sources packed onto the first nodes.
pub fn build_allocation(
    cluster: &ClusterConfig,
    request: &ReconfigRequest,
) -> Result<AllocationVectors, ClusterError> {
    request.validate(cluster)?;
    let a = pack(&cluster.cores(), request.ns);
    allocation_from_sources(cluster, request, a)
}

/// Allocation for `request` with an explicit source layout `a`.
pub fn build_allocation_with_sources(
    cluster: &ClusterConfig,
    request: &ReconfigRequest,
    a: &[u32],
) -> Result<AllocationVectors, ClusterError> {
    request.validate(cluster)?;
    let actual: u64 = a.iter().map(|&x| u64::from(x)).sum();
    if actual != request.ns {
        return Err(ClusterError::SourceCountMismatch { expected: request.ns, actual });
    }
    allocation_from_sources(cluster, request, a.to_vec())
}

fn allocation_from_sources(
    cluster: &ClusterConfig,
    request: &ReconfigRequest,
    a: Vec<u32>,
) -> Result<AllocationVectors, ClusterError> {
    let m = cluster.cores();
    check_sources(&m, &a)?;

    if !request.is_expansion() {
        let plan = shrink_from_layout(cluster, &a, request.nt)?;
        let s = plan.nodes.iter().map(|n| -i64::from(n.terminated)).collect();
        return Ok(AllocationVectors { m, a, s, partial_fill: false });
    }

    let mut residual = request.nt - request.ns;
    let mut partial_fill = false;
    let s = m
        .iter()
        .zip(&a)
        .map(|(&m, &a)| {
            let free = u64::from(m - a);
            let take = residual.min(free);
            residual -= take;
            if take > 0 && take < free {
                partial_fill = true;
            }
            take as i64
        })
        .collect();
    if residual > 0 {
        return Err(ClusterError::CapacityExceeded {
            requested: request.nt,
            capacity: cluster.capacity(),
        });
    }
    Ok(AllocationVectors { m, a, s, partial_fill })
}

/// Allocation used when every target is spawned anew (Baseline): the `nt`
/// targets are packed from node 0 regardless of where sources run, so nodes
/// hosting both are oversubscribed until the sources terminate.
pub fn baseline_allocation(
    cluster: &ClusterConfig,
    a: &[u32],
    nt: u64,
) -> Result<AllocationVectors, ClusterError> {
    let m = cluster.cores();
    check_sources(&m, a)?;
    let capacity = cluster.capacity();
    if nt == 0 || nt > capacity {
        return Err(ClusterError::CapacityExceeded { requested: nt, capacity });
    }
    let targets = pack(&m, nt);
    let partial_fill = targets.iter().zip(&m).any(|(&t, &m)| t > 0 && t < m);
    Ok(AllocationVectors {
        m,
        a: a.to_vec(),
        s: targets.into_iter().map(i64::from).collect(),
        partial_fill,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeShrink {
    pub node: usize,
    pub cores: u32,
    pub before: u32,
    pub survivors: u32,
    pub terminated: u32,
    pub released: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Survivor {
    pub rank: u64,
    pub previous_rank: u64,
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShrinkPlan {
    pub ns: u64,
    pub nt: u64,
    pub nodes: Vec<NodeShrink>,
    pub survivors: Vec<Survivor>,
}

impl ShrinkPlan {
    pub fn released_nodes(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.released).map(|n| n.node).collect()
    }

    pub fn released_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.released).count()
    }

    pub fn terminated(&self) -> u64 {
        self.nodes.iter().map(|n| u64::from(n.terminated)).sum()
    }

    pub fn occupied_before(&self) -> usize {
        self.nodes.iter().filter(|n| n.before > 0).count()
    }

    pub fn source_layout(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.before).collect()
    }

    pub fn cores(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.cores).collect()
    }
}

/// Shrink plan for `ns` sources packed in node order down to `nt` survivors.
/// Survivors are kept on the lowest-indexed nodes so whole nodes are released.
pub fn shrink_allocation(
    cluster: &ClusterConfig,
    ns: u64,
    nt: u64,
) -> Result<ShrinkPlan, ClusterError> {
    cluster.validate()?;
    if nt == 0 || nt >= ns {
        return Err(ClusterError::InvalidShrink { ns, nt });
    }
    if ns > cluster.capacity() {
        return Err(ClusterError::CapacityExceeded { requested: ns, capacity: cluster.capacity() });
    }
    let a = pack(&cluster.cores(), ns);
    shrink_from_layout(cluster, &a, nt)
}

/// Shrink plan for an explicit source layout.
pub fn shrink_from_layout(
    cluster: &ClusterConfig,
    a: &[u32],
    nt: u64,
) -> Result<ShrinkPlan, ClusterError> {
    let m = cluster.cores();
    check_sources(&m, a)?;
    let ns: u64 = a.iter().map(|&x| u64::from(x)).sum();
    if nt == 0 || nt >= ns {
        return Err(ClusterError::InvalidShrink { ns, nt });
    }

    let mut keep_left = nt;
    let mut nodes = Vec::with_capacity(m.len());
    let mut survivors = Vec::with_capacity(nt as usize);
    let mut previous_rank = 0u64;
    for (i, (&cores, &before)) in m.iter().zip(a).enumerate() {
        let kept = keep_left.min(u64::from(before)) as u32;
        keep_left -= u64::from(kept);
        for local in 0..u64::from(kept) {
            survivors.push(Survivor {
                rank: survivors.len() as u64,
                previous_rank: previous_rank + local,
                node: i,
            });
        }
        previous_rank += u64::from(before);
        nodes.push(NodeShrink {
            node: i,
            cores,
            before,
            survivors: kept,
            terminated: before - kept,
            released: before > 0 && kept == 0,
        });
    }
    Ok(ShrinkPlan { ns, nt, nodes, survivors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn merge_req(ns: u64, nt: u64) -> ReconfigRequest {
        ReconfigRequest::new(ns, nt, Strategy::IterativeDiffusive, ResizeMethod::Merge)
    }

    #[test]
    fn single_core_nodes_expand_one_to_four() {
        let cluster = ClusterConfig::homogeneous(4, 1);
        let alloc = build_allocation(&cluster, &merge_req(1, 4)).unwrap();
        assert_eq!(alloc.m, vec![1, 1, 1, 1]);
        assert_eq!(alloc.a, vec![1, 0, 0, 0]);
        assert_eq!(alloc.s, vec![0, 1, 1, 1]);
        assert!(!alloc.partial_fill);
    }

    #[test]
    fn heterogeneous_expansion_subtracts_packed_sources() {
        let cluster = ClusterConfig::from_cores(&[20, 20, 32, 32]);
        let alloc = build_allocation(&cluster, &merge_req(20, 104)).unwrap();
        // elementwise M - A with A = [20, 0, 0, 0]
        let expected: Vec<i64> = [20, 20, 32, 32]
            .iter()
            .zip([20, 0, 0, 0])
            .map(|(m, a)| m - a)
            .collect();
        assert_eq!(alloc.a, vec![20, 0, 0, 0]);
        assert_eq!(alloc.s, expected);
    }

    #[test]
    fn equal_counts_are_rejected() {
        let cluster = ClusterConfig::homogeneous(2, 56);
        assert_eq!(
            build_allocation(&cluster, &merge_req(112, 112)),
            Err(ClusterError::NoOp(112))
        );
    }

    #[test]
    fn capacity_and_homogeneity_errors() {
        let cluster = ClusterConfig::from_cores(&[4, 8]);
        assert!(matches!(
            build_allocation(&cluster, &merge_req(4, 13)),
            Err(ClusterError::CapacityExceeded { requested: 13, capacity: 12 })
        ));
        let hyper = ReconfigRequest::new(4, 12, Strategy::Hypercube, ResizeMethod::Merge);
        assert_eq!(build_allocation(&cluster, &hyper), Err(ClusterError::NotHomogeneous));
        let uneven = ReconfigRequest::new(4, 6, Strategy::Hypercube, ResizeMethod::Merge);
        assert!(matches!(
            build_allocation(&ClusterConfig::homogeneous(3, 4), &uneven),
            Err(ClusterError::NonDivisible { count: 6, cores: 4 })
        ));
    }

    #[test]
    fn partial_fill_is_clipped_and_flagged() {
        let cluster = ClusterConfig::from_cores(&[4, 4, 4]);
        let alloc = build_allocation(&cluster, &merge_req(4, 6)).unwrap();
        assert_eq!(alloc.s, vec![0, 2, 0]);
        assert!(alloc.partial_fill);
        assert_eq!(alloc.spawned(), 2);
    }

    #[test]
    fn explicit_layout_must_match_ns() {
        let cluster = ClusterConfig::from_cores(&[4, 4]);
        let req = merge_req(3, 8);
        let alloc = build_allocation_with_sources(&cluster, &req, &[1, 2]).unwrap();
        assert_eq!(alloc.s, vec![3, 2]);
        assert!(matches!(
            build_allocation_with_sources(&cluster, &req, &[1, 1]),
            Err(ClusterError::SourceCountMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn shrink_to_single_survivor_releases_other_nodes() {
        let plan = shrink_allocation(&ClusterConfig::homogeneous(4, 1), 4, 1).unwrap();
        assert_eq!(plan.released_nodes(), vec![1, 2, 3]);
        assert_eq!(plan.survivors, vec![Survivor { rank: 0, previous_rank: 0, node: 0 }]);
    }

    #[test]
    fn shrink_keeps_first_nodes() {
        let cluster = ClusterConfig::from_cores(&[20, 20, 32, 32]);
        let plan = shrink_allocation(&cluster, 104, 40).unwrap();
        let kept: Vec<u32> = plan.nodes.iter().map(|n| n.survivors).collect();
        let gone: Vec<u32> = plan.nodes.iter().map(|n| n.terminated).collect();
        assert_eq!(kept, vec![20, 20, 0, 0]);
        assert_eq!(gone, vec![0, 0, 32, 32]);
        assert_eq!(plan.released_nodes(), vec![2, 3]);
        assert_eq!(plan.terminated(), 64);
    }

    #[test]
    fn shrink_rejects_non_shrinks() {
        let cluster = ClusterConfig::from_cores(&[20, 20, 32, 32]);
        assert_eq!(
            shrink_allocation(&cluster, 104, 104),
            Err(ClusterError::InvalidShrink { ns: 104, nt: 104 })
        );
        assert!(shrink_allocation(&cluster, 104, 0).is_err());
    }

    #[test]
    fn shrink_request_yields_negative_s() {
        let cluster = ClusterConfig::homogeneous(4, 2);
        let alloc = build_allocation(&cluster, &merge_req(8, 3)).unwrap();
        assert_eq!(alloc.s, vec![0, -1, -2, -2]);
    }

    #[test]
    fn baseline_allocation_overlaps_sources() {
        let cluster = ClusterConfig::homogeneous(4, 2);
        let alloc = baseline_allocation(&cluster, &[2, 0, 0, 0], 6).unwrap();
        assert_eq!(alloc.s, vec![2, 2, 2, 0]);
    }
}
