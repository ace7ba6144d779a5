//! Solver feasibility of an elementwise block agrees with direct broadcasting
//! on every pair of small shapes.

use forge_core::graph::{build, BuildConfig, BuildMode};
use forge_core::oracle::broadcast_shapes;
use forge_core::solver::{emit_constraints, solve, SolveError};
use forge_core::{Catalog, GlobalLimits, Shape, SolverConfig};

fn shapes(max_order: usize) -> Vec<Vec<u32>> {
    let mut all = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_order {
        let mut next = Vec::new();
        for s in &frontier {
            for d in 1..=3 {
                let mut t: Vec<u32> = s.clone();
                t.push(d);
                next.push(t);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

#[test]
fn elementwise_feasibility_matches_broadcasting() {
    let catalog = Catalog::standard();
    let g = build(&BuildConfig::new(1, BuildMode::Dag, 0).with_subset(["Add"]), catalog).unwrap();
    let (a, b) = (g.nodes[0].inputs[0], g.nodes[0].inputs[1]);
    let limits = GlobalLimits { min_flops: 0, min_size_tensor: 1, ..GlobalLimits::default() };
    let base = emit_constraints(&g, catalog, limits).unwrap();
    let all = shapes(3);
    assert_eq!(all.len(), 40);
    let mut mismatches = Vec::new();
    for x in &all {
        for y in &all {
            let mut cs = base.clone();
            cs.pin(a, Shape::new(x.clone())).pin(b, Shape::new(y.clone()));
            let expected = broadcast_shapes(&[x.clone(), y.clone()]);
            let got = solve(&cs, &SolverConfig { time_budget: 5.0, ..SolverConfig::default() });
            let agree = match (&expected, &got) {
                (Ok(out), Ok(sol)) => sol.shape(g.nodes[0].output.edge_id) == Some(&Shape::new(out.clone())),
                (Err(_), Err(SolveError::Infeasible(_))) => true,
                _ => false,
            };
            if !agree {
                mismatches.push((x.clone(), y.clone(), expected.is_ok(), format!("{got:?}")));
            }
        }
    }
    assert!(mismatches.is_empty(), "{} mismatches, first: {:?}", mismatches.len(), mismatches.first());
}
