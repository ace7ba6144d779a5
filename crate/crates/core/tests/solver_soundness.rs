//! Every solution the solver returns is accepted by the constraint checker and
//! by the independent shape oracle.

use forge_core::graph::{build, BuildConfig, BuildMode};
use forge_core::shape::MAX_DIM;
use forge_core::solver::{check, emit_constraints, solve, SolveError};
use forge_core::{verify_program, Catalog, GlobalLimits, Shape, SolverConfig};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn mode() -> impl Strategy<Value = BuildMode> {
    prop_oneof![Just(BuildMode::Dag), Just(BuildMode::Chain)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn solutions_pass_checker_and_oracle(level in prop_oneof![Just(1u32), Just(2), Just(5), Just(10)], mode in mode(), seed in any::<u64>()) {
        let catalog = Catalog::standard();
        let g = build(&BuildConfig::new(level, mode, seed).with_order_filter(true), catalog).unwrap();
        let limits = GlobalLimits::default();
        let cs = emit_constraints(&g, catalog, limits).unwrap();
        let cfg = SolverConfig { seed, time_budget: 10.0, ..SolverConfig::default() };
        match solve(&cs, &cfg) {
            Ok(sol) => {
                prop_assert!(check(&sol, &cs).unwrap().is_empty());
                let report = verify_program(&g, &sol);
                prop_assert!(report.is_ok(), "{:?}", report);
                for s in sol.shapes.values() {
                    prop_assert!(s.dims().iter().all(|&d| (1..=MAX_DIM).contains(&d)));
                }
                prop_assert!(sol.total_flops <= limits.max_flops);
                prop_assert!(sol.total_numel <= limits.max_size);
            }
            Err(SolveError::Infeasible(_)) | Err(SolveError::TimedOut(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn matmul_shapes_vary_across_seeds() {
    let catalog = Catalog::standard();
    let mut distinct: BTreeSet<Vec<Shape>> = BTreeSet::new();
    for seed in 0..100 {
        let g = build(&BuildConfig::new(1, BuildMode::Dag, seed).with_subset(["Matmul"]), catalog).unwrap();
        let sol = forge_core::solve_graph(&g, catalog, &SolverConfig::with_seed(seed)).unwrap();
        distinct.insert(sol.shapes.values().cloned().collect());
    }
    assert!(distinct.len() >= 10, "only {} distinct solutions", distinct.len());
}

#[test]
fn pinned_shapes_are_respected() {
    let catalog = Catalog::standard();
    let g = build(&BuildConfig::new(1, BuildMode::Dag, 5).with_subset(["Matmul"]), catalog).unwrap();
    let mut cs = emit_constraints(&g, catalog, GlobalLimits::default()).unwrap();
    let (a, b) = (g.nodes[0].inputs[0], g.nodes[0].inputs[1]);
    cs.pin(a, Shape::from([64, 128])).pin(b, Shape::from([128, 256]));
    let sol = solve(&cs, &SolverConfig::default()).unwrap();
    assert_eq!(sol.shape(g.nodes[0].output.edge_id), Some(&Shape::from([64, 256])));
    assert_eq!(sol.total_flops, 2 * 64 * 128 * 256);

    cs.pin(b, Shape::from([127, 256]));
    assert!(matches!(solve(&cs, &SolverConfig::default()), Err(SolveError::Infeasible(_))));
}

#[test]
fn work_budget_is_reported() {
    let catalog = Catalog::standard();
    let g = build(&BuildConfig::new(20, BuildMode::Dag, 3).with_order_filter(true), catalog).unwrap();
    let cfg = SolverConfig { max_work: Some(1), ..SolverConfig::default() };
    match forge_core::solve_graph(&g, catalog, &cfg) {
        Err(SolveError::WorkExhausted(n)) => assert!(n >= 1),
        Err(SolveError::Infeasible(_)) | Ok(_) => {}
        Err(e) => panic!("unexpected {e}"),
    }
}
