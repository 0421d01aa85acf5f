mod common;

use common::{expansion_case, expected_nodes_by_rank, halving_rounds, shrink_case};
use espsim::cluster::{
    build_allocation, shrink_allocation, AllocationVectors, ClusterConfig, ReconfigRequest, ResizeMethod, Strategy,
};
use espsim::planner::{plan_diffusive, plan_hypercube, GroupRef};
use espsim::sim::explore::explore;
use espsim::sim::{
    binary_connection_with, simulate_binary_connection, simulate_full, simulate_full_with, simulate_sync,
    EventKind, Layout, PortMatching, SimError, SimOptions, SimOutcome, SimTrace, SourceLink, Stages,
};
use proptest::prelude::*;

fn request(ns: u64, nt: u64) -> ReconfigRequest {
    ReconfigRequest::new(ns, nt, Strategy::IterativeDiffusive, ResizeMethod::Merge)
}

fn single_core(nodes: usize) -> ClusterConfig {
    ClusterConfig::homogeneous(nodes, 1)
}

fn full_stages(matching: PortMatching) -> Stages {
    Stages { spawn: true, sync: true, binary: true, source_port: true, preopen: false, matching }
}

/// Checks every structural property of a finished expansion.
fn check_expansion(cluster: &ClusterConfig, ns: u64, nt: u64, outcome: &SimOutcome) {
    let trace = &outcome.trace;
    trace.check_well_formed().unwrap();
    trace.check_port_safety().unwrap();

    let world = &outcome.world;
    assert_eq!(world.len() as u64, nt, "every target process is a member");
    assert_eq!(world.group_id, 0);
    assert!(world.is_permutation());
    let alloc = build_allocation(cluster, &request(ns, nt)).unwrap();
    let nodes: Vec<usize> = world.by_rank().iter().map(|m| m.node).collect();
    assert_eq!(nodes, expected_nodes_by_rank(&alloc));

    let splits = trace.count(EventKind::Split);
    let merges = trace.count(EventKind::Merge);
    assert_eq!(trace.count(EventKind::Disconnect), (splits - 1) + 2 * merges);
    assert_eq!(merges + 1, outcome.schedule.as_ref().unwrap().groups());

    assert!(matches!(outcome.link, SourceLink::Linked { .. }));
    let source_port = |kind| trace.of_kind(kind).filter(|e| e.port == Some(GroupRef::Source)).count();
    assert_eq!(source_port(EventKind::Accept), 1);
    assert_eq!(source_port(EventKind::Connect), 1);
    let last_merge = trace.of_kind(EventKind::Merge).map(|e| e.time).max().unwrap_or(0);
    let link_time = trace.of_kind(EventKind::Accept).filter(|e| e.port == Some(GroupRef::Source)).map(|e| e.time);
    assert!(link_time.min().unwrap() > last_merge);
}

fn rounds_by_connect(trace: &SimTrace) -> Vec<(u32, u32, u32)> {
    // (round, connecting group root pid, port)
    let mut out: Vec<_> = trace
        .of_kind(EventKind::Connect)
        .filter_map(|e| Some((e.round?, e.actor, e.port?.id()?)))
        .collect();
    out.sort_unstable();
    out
}

#[test]
fn minimal_tree_tokens() {
    let alloc = AllocationVectors::from_capacity(vec![1, 1], vec![1, 0]).unwrap();
    let schedule = plan_diffusive(&alloc).unwrap();
    let trace = simulate_sync(&alloc, &schedule, 0).unwrap();
    // upside child token plus downside token
    assert_eq!(trace.count(EventKind::Send), 2);
    assert_eq!(trace.count(EventKind::Recv), 2);
    trace.check_well_formed().unwrap();
}

#[test]
fn six_groups_leaves_first() {
    // two one-core sources on an eight-node cluster: groups over two steps
    let alloc = AllocationVectors::from_capacity(vec![1; 8], [1, 1, 0, 0, 0, 0, 0, 0].to_vec()).unwrap();
    let schedule = plan_diffusive(&alloc).unwrap();
    assert_eq!(schedule.groups(), 6);
    assert_eq!(schedule.step_sizes(), vec![2, 4]);
    let leaves: Vec<u32> = (2..6).map(|g| 2 + g).collect();
    for seed in 0..50 {
        let trace = simulate_sync(&alloc, &schedule, seed).unwrap();
        trace.check_well_formed().unwrap();
        // sources are pids 0 and 1, group g is pid g + 2
        let first_send = trace.of_kind(EventKind::Send).next().unwrap();
        assert!(leaves.contains(&first_send.actor));
        let source_barrier = trace.of_kind(EventKind::Barrier).filter(|e| e.actor < 2).map(|e| e.time).min();
        let group_barriers = trace.of_kind(EventKind::Barrier).filter(|e| e.actor >= 2).map(|e| e.time);
        assert!(group_barriers.min().unwrap() < source_barrier.unwrap());
    }
}

#[test]
fn seven_group_sync_many_seeds() {
    let alloc = AllocationVectors::from_capacity(vec![1; 8], [1, 0, 0, 0, 0, 0, 0, 0].to_vec()).unwrap();
    let schedule = plan_hypercube(&alloc, 1).unwrap();
    for seed in 0..500 {
        let trace = simulate_sync(&alloc, &schedule, seed).unwrap();
        trace.check_well_formed().unwrap();
    }
}

#[test]
fn seven_groups_pair_mirrors() {
    for seed in 0..20 {
        let (world, trace) = simulate_binary_connection(&[1; 7], seed).unwrap();
        assert_eq!(world.len(), 7);
        assert_eq!(trace.rounds(), 3);
        // pid == group id with single-process groups
        let first: Vec<(u32, u32)> =
            rounds_by_connect(&trace).into_iter().filter(|r| r.0 == 1).map(|r| (r.1, r.2)).collect();
        assert_eq!(first, vec![(4, 2), (5, 1), (6, 0)]);
    }
}

#[test]
fn single_group_connects_nothing() {
    let (world, trace) = simulate_binary_connection(&[3], 9).unwrap();
    assert_eq!(world.len(), 3);
    assert_eq!(trace.rounds(), 0);
    assert_eq!(trace.count(EventKind::Connect), 0);
}

#[test]
fn rounds_follow_halving() {
    for groups in 2..=64u32 {
        let sizes = vec![1; groups as usize];
        for seed in [0, 1, 2] {
            let (world, trace) = simulate_binary_connection(&sizes, seed).unwrap();
            assert_eq!(world.len(), groups as usize);
            assert_eq!(trace.rounds(), halving_rounds(u64::from(groups)), "G={groups}");
        }
    }
}

#[test]
fn eight_node_expansion_is_seed_independent() {
    let cluster = single_core(8);
    let reference = simulate_full(&cluster, &request(1, 8), 0).unwrap();
    check_expansion(&cluster, 1, 8, &reference);
    let ranks: Vec<usize> = reference.world.by_rank().iter().map(|m| m.node).collect();
    assert_eq!(ranks, (0..8).collect::<Vec<_>>());
    let mut orders = std::collections::BTreeSet::new();
    for seed in 1..100 {
        let outcome = simulate_full(&cluster, &request(1, 8), seed).unwrap();
        assert_eq!(outcome.world.mapping(), reference.world.mapping());
        orders.insert(outcome.trace.of_kind(EventKind::Merge).map(|e| e.actor).collect::<Vec<_>>());
    }
    assert!(orders.len() > 1, "interleavings differ across seeds");
}

#[test]
fn heterogeneous_keys_start_after_sources() {
    let cluster = ClusterConfig::from_cores(&[20, 20, 32, 32]);
    let outcome = simulate_full(&cluster, &request(20, 104), 5).unwrap();
    check_expansion(&cluster, 20, 104, &outcome);
    let first_spawned = outcome.world.by_rank().into_iter().find(|m| m.group != GroupRef::Source).unwrap();
    assert_eq!(first_spawned.rank, 20);
}

#[test]
fn baseline_keeps_only_targets() {
    let cluster = ClusterConfig::homogeneous(4, 2);
    let req = ReconfigRequest::new(2, 8, Strategy::Hypercube, ResizeMethod::Baseline);
    let outcome = simulate_full(&cluster, &req, 1).unwrap();
    assert_eq!(outcome.world.len(), 8);
    assert_eq!(outcome.world.spawned_len(), 8);
    assert_eq!(outcome.trace.count(EventKind::Terminate), 2);
    outcome.trace.check_port_safety().unwrap();
}

#[test]
fn shrink_spawns_nothing() {
    let cluster = single_core(8);
    let outcome = simulate_full(&cluster, &request(8, 2), 4).unwrap();
    for kind in [EventKind::Spawn, EventKind::Accept, EventKind::Connect] {
        assert_eq!(outcome.trace.count(kind), 0);
    }
    assert_eq!(outcome.trace.count(EventKind::Terminate), 6);
    assert_eq!(outcome.world.len(), 2);
}

#[test]
fn exhaustive_small_trees_always_complete() {
    let mut checked = 0;
    for (nodes, cores, ns) in [(2, 1, 1), (3, 1, 1), (4, 1, 1), (2, 2, 2), (3, 2, 1), (4, 1, 2)] {
        let cluster = ClusterConfig::homogeneous(nodes, cores);
        let alloc = build_allocation(&cluster, &request(ns, cluster.capacity())).unwrap();
        let schedule = plan_diffusive(&alloc).unwrap();
        assert!(schedule.groups() <= 3);
        let sources = espsim::sim::source_nodes(&alloc.a);
        let layout = Layout::from_schedule(&sources, &schedule, full_stages(PortMatching::ByRound));
        let report = explore(&layout, 2_000_000);
        assert!(report.all_complete(), "{nodes}x{cores} ns={ns}: {report:?}");
        checked += report.states;
    }
    assert!(checked > 1000);
}

#[test]
fn exhaustive_binary_connection() {
    let preopened = Stages {
        spawn: false,
        sync: false,
        binary: true,
        source_port: false,
        preopen: true,
        matching: PortMatching::ByRound,
    };
    for groups in 1..=5 {
        let layout = Layout::groups_only(&vec![1; groups], preopened);
        assert!(explore(&layout, 2_000_000).all_complete(), "G={groups}");
    }
}

#[test]
fn first_come_matching_can_cross_rounds() {
    // group 1 idles in round one and may reach port 0 before group 2 does
    let stages = Stages {
        spawn: false,
        sync: false,
        binary: true,
        source_port: false,
        preopen: true,
        matching: PortMatching::Fifo,
    };
    let report = explore(&Layout::groups_only(&[1, 1, 1], stages), 2_000_000);
    assert!(!report.truncated);
    assert!(report.deadlocks + report.faults > 0, "{report:?}");
    let failing = (0..200).filter(|&s| binary_connection_with(&[1; 3], s, PortMatching::Fifo).is_err()).count();
    assert!(failing > 0);
}

#[test]
fn skipping_sync_exposes_early_connects() {
    let cluster = single_core(16);
    let options = SimOptions { sync: false, matching: PortMatching::ByRound };
    let faults = (0..100)
        .filter_map(|seed| simulate_full_with(&cluster, &request(1, 16), None, seed, options).err())
        .filter(|e| matches!(e, SimError::PortFault { .. }))
        .count();
    assert!(faults > 0);
}

#[test]
fn protocol_runs_are_thread_safe() {
    use rayon::prelude::*;
    let cluster = single_core(12);
    let mappings: Vec<_> = (0..32u64)
        .into_par_iter()
        .map(|seed| simulate_full(&cluster, &request(1, 12), seed).unwrap().world.mapping())
        .collect();
    assert!(mappings.windows(2).all(|w| w[0] == w[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_expansions_complete((cluster, ns, nt) in expansion_case(12, 6), seed in any::<u64>()) {
        let outcome = simulate_full(&cluster, &request(ns, nt), seed).unwrap();
        check_expansion(&cluster, ns, nt, &outcome);
    }

    #[test]
    fn mapping_ignores_seed((cluster, ns, nt) in expansion_case(10, 4), a in any::<u64>(), b in any::<u64>()) {
        let x = simulate_full(&cluster, &request(ns, nt), a).unwrap();
        let y = simulate_full(&cluster, &request(ns, nt), b).unwrap();
        prop_assert_eq!(x.world.mapping(), y.world.mapping());
    }

    #[test]
    fn merge_shrink_frees_nodes((cluster, ns, nt) in shrink_case(12, 6), seed in any::<u64>()) {
        let outcome = simulate_full(&cluster, &request(ns, nt), seed).unwrap();
        for kind in [EventKind::Spawn, EventKind::Accept, EventKind::Connect] {
            prop_assert_eq!(outcome.trace.count(kind), 0);
        }
        prop_assert_eq!(outcome.trace.count(EventKind::Terminate) as u64, ns - nt);
        prop_assert_eq!(outcome.world.len() as u64, nt);
        prop_assert!(outcome.world.is_permutation());
        let plan = shrink_allocation(&cluster, ns, nt).unwrap();
        for node in plan.released_nodes() {
            prop_assert!(outcome.world.members.iter().all(|m| m.node != node));
        }
    }
}
