mod common;

use common::{expansion_case, halving_rounds, shrink_case};
use espsim::cluster::{shrink_allocation, ClusterConfig};
use espsim::cost::{
    best_method_matrix, compare_shrink, cost_expand, cost_shrink, CostParams, Method,
};
use proptest::prelude::*;

fn params_strategy() -> impl Strategy<Value = CostParams> {
    (
        prop::array::uniform7(0.0f64..10.0),
        1.0f64..4.0,
    )
        .prop_map(|(v, oversub)| CostParams {
            spawn_base: v[0],
            spawn_per_proc: v[1],
            connect: v[2],
            merge: v[3],
            barrier: v[4],
            msg: v[5],
            terminate: v[6],
            oversub_factor: oversub,
        })
}

fn bump(params: &CostParams, field: usize, delta: f64) -> CostParams {
    let mut p = *params;
    let slot = match field {
        0 => &mut p.spawn_base,
        1 => &mut p.spawn_per_proc,
        2 => &mut p.connect,
        3 => &mut p.merge,
        4 => &mut p.barrier,
        5 => &mut p.msg,
        6 => &mut p.terminate,
        _ => &mut p.oversub_factor,
    };
    *slot += delta;
    p
}

fn wide_cluster() -> ClusterConfig {
    ClusterConfig::homogeneous(32, 112)
}

#[test]
fn eight_groups_connect_in_three_rounds() {
    let cluster = ClusterConfig::homogeneous(9, 4);
    let p = CostParams::default();
    let r = cost_expand(Method::ParallelMerge, &cluster, 4, 36, &p).unwrap();
    let rounds = f64::from(halving_rounds(8));
    assert_eq!(r.phases.connect, rounds * (p.connect + p.merge));
}

#[test]
fn parallel_rounds_against_sequential_calls() {
    let cluster = ClusterConfig::homogeneous(32, 1);
    let p = CostParams::default();
    let par = cost_expand(Method::ParallelMerge, &cluster, 1, 32, &p).unwrap();
    let seq = cost_expand(Method::Sequential, &cluster, 1, 32, &p).unwrap();
    assert_eq!(par.spawn_rounds, common::brute_hypercube(1, 1, 32).len() as u32 - 1);
    assert_eq!(seq.spawn_rounds, 31);
    assert!(par.phases.spawn < seq.phases.spawn);
}

#[test]
fn full_shrink_ratio_under_default_calibration() {
    let cluster = wide_cluster();
    let plan = shrink_allocation(&cluster, cluster.capacity(), 112).unwrap();
    let p = CostParams::default();
    let cmp = compare_shrink(&plan, &p).unwrap();
    let baseline = (p.spawn_base + p.spawn_per_proc * 112.0) * p.oversub_factor + p.terminate * 3584.0;
    let merge = p.terminate * (3584.0 - 112.0);
    assert!((cmp.baseline.total - baseline).abs() < 1e-12);
    assert!((cmp.merge.total - merge).abs() < 1e-12);
    assert!(cmp.speedup >= 20.0, "{}", cmp.speedup);
    assert_eq!(cmp.merge.released_nodes, 31);
}

#[test]
fn merge_ranks_first_when_shrinking() {
    let nodes = [1, 2, 4, 8, 16, 24, 32];
    let matrix = best_method_matrix(&wide_cluster(), &nodes, &CostParams::default()).unwrap();
    assert_eq!(matrix.cells.len(), 42);
    for cell in matrix.cells.iter().filter(|c| !c.is_expansion()) {
        assert_eq!(cell.best(), Method::Merge, "{} -> {}", cell.ns_nodes, cell.nt_nodes);
    }
}

#[test]
fn free_synchronization_makes_parallel_merge_tie() {
    let p = CostParams { connect: 0.0, merge: 0.0, barrier: 0.0, msg: 0.0, ..CostParams::default() };
    let cluster = ClusterConfig::homogeneous(4, 4);
    let matrix = best_method_matrix(&cluster, &[1, 2, 3, 4], &p).unwrap();
    let mut ties = 0;
    for cell in matrix.cells.iter().filter(|c| c.is_expansion()) {
        let (ns, nt) = (cluster.prefix_capacity(cell.ns_nodes), cluster.prefix_capacity(cell.nt_nodes));
        let par = cost_expand(Method::ParallelMerge, &cluster, ns, nt, &p).unwrap();
        assert_eq!(par.total, par.phases.spawn);
        if cell.nt_nodes == cell.ns_nodes + 1 {
            // one group of one node: both reduce to a single spawn of the same size
            let single = cost_expand(Method::Merge, &cluster, ns, nt, &p).unwrap();
            assert_eq!(par.total, single.total);
            ties += 1;
        }
    }
    assert_eq!(ties, 3);
    let one = best_method_matrix(&cluster, &[1], &p).unwrap();
    assert!(one.cells.is_empty());
}

#[test]
fn overhead_bound_on_small_group_counts() {
    let nodes = [1, 2, 4, 8, 16, 24, 32];
    let cluster = wide_cluster();
    let p = CostParams::default();
    for &ns in &nodes {
        for &nt in nodes.iter().filter(|&&nt| nt > ns && nt - ns <= 8) {
            let (ns, nt) = (cluster.prefix_capacity(ns), cluster.prefix_capacity(nt));
            let par = cost_expand(Method::ParallelMerge, &cluster, ns, nt, &p).unwrap();
            let single = cost_expand(Method::Merge, &cluster, ns, nt, &p).unwrap();
            assert!(par.total / single.total <= 1.3, "{ns}->{nt}: {}", par.total / single.total);
        }
    }
}

#[test]
fn unknown_method_is_rejected() {
    assert!("Hybrid".parse::<Method>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn totals_are_phase_sums((cluster, ns, nt) in expansion_case(16, 16), p in params_strategy()) {
        for m in Method::ALL {
            let r = cost_expand(m, &cluster, ns, nt, &p).unwrap();
            let sum = r.phases.spawn + r.phases.sync + r.phases.connect + r.phases.reorder + r.phases.terminate;
            prop_assert_eq!(r.total, sum);
        }
    }

    #[test]
    fn costs_never_drop_when_a_parameter_grows(
        (cluster, ns, nt) in expansion_case(16, 16),
        p in params_strategy(),
        field in 0usize..8,
        delta in 0.0f64..5.0,
    ) {
        let higher = bump(&p, field, delta);
        for m in Method::ALL {
            let before = cost_expand(m, &cluster, ns, nt, &p).unwrap().total;
            let after = cost_expand(m, &cluster, ns, nt, &higher).unwrap().total;
            prop_assert!(after >= before, "{m} field {field}");
        }
    }

    #[test]
    fn shrink_costs_never_drop_when_a_parameter_grows(
        (cluster, ns, nt) in shrink_case(16, 16),
        p in params_strategy(),
        field in 0usize..8,
        delta in 0.0f64..5.0,
    ) {
        let plan = shrink_allocation(&cluster, ns, nt).unwrap();
        let higher = bump(&p, field, delta);
        for m in Method::ALL {
            let before = cost_shrink(m, &plan, &p).unwrap();
            let after = cost_shrink(m, &plan, &higher).unwrap();
            prop_assert!(after.total >= before.total);
            prop_assert_eq!(before.released_nodes, plan.released_count());
        }
    }

    #[test]
    fn merge_shrink_is_cheaper((cluster, ns, nt) in shrink_case(16, 16), p in params_strategy()) {
        prop_assume!(p.terminate <= p.spawn_base + p.spawn_per_proc);
        let plan = shrink_allocation(&cluster, ns, nt).unwrap();
        let cmp = compare_shrink(&plan, &p).unwrap();
        prop_assert!(cmp.merge.total <= cmp.baseline.total);
        prop_assert_eq!(cmp.merge.phases.spawn, 0.0);
        prop_assert_eq!(cmp.merge.phases.connect, 0.0);
    }

    #[test]
    fn parallel_rounds_never_exceed_sequential((cluster, ns, nt) in expansion_case(24, 8)) {
        let p = CostParams::default();
        let par = cost_expand(Method::ParallelMerge, &cluster, ns, nt, &p).unwrap();
        let seq = cost_expand(Method::Sequential, &cluster, ns, nt, &p).unwrap();
        prop_assert!(par.spawn_rounds <= seq.spawn_rounds);
    }
}
