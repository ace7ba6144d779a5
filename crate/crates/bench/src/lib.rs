//! Fixtures shared by the benchmarks.

use forge_core::graph::{build, BuildConfig, BuildMode};
use forge_core::seed::derive;
use forge_core::{emit, solve_graph, Catalog, EmittedProgram, ProgramGraph, ShapeSolution, SolverConfig};

/// Solver settings for benchmarks: the dataset work budget keeps every
/// iteration bounded.
pub fn solver_config(seed: u64) -> SolverConfig {
    SolverConfig { seed, time_budget: 60.0, max_work: Some(50_000), ..SolverConfig::default() }
}

/// `count` graphs at `level` that the solver can solve, with their solutions.
pub fn solved(level: u32, mode: BuildMode, count: usize, seed: u64) -> Vec<(ProgramGraph, ShapeSolution)> {
    let catalog = Catalog::standard();
    let mut out = Vec::with_capacity(count);
    for k in 0u64.. {
        if out.len() == count {
            break;
        }
        let s = derive(seed, &[u64::from(level), k]);
        let Ok(g) = build(&BuildConfig::new(level, mode, s).with_order_filter(true), catalog) else { continue };
        if let Ok(sol) = solve_graph(&g, catalog, &solver_config(s)) {
            out.push((g, sol));
        }
    }
    out
}

/// One emitted program at `level`.
pub fn program(level: u32, seed: u64) -> EmittedProgram {
    let (g, sol) = solved(level, BuildMode::Chain, 1, seed).remove(0);
    emit(&g, &sol, Catalog::standard()).expect("solved graphs emit")
}
