use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forge_bench::{solved, solver_config};
use forge_core::graph::BuildMode;
use forge_core::{solve_graph, Catalog};

fn solve_levels(c: &mut Criterion) {
    let catalog = Catalog::standard();
    let mut group = c.benchmark_group("solve");
    group.sample_size(20);
    for level in [1u32, 2, 5, 20] {
        let graphs = solved(level, BuildMode::Dag, 8, 3);
        group.bench_with_input(BenchmarkId::from_parameter(level), &graphs, |b, graphs| {
            let mut i = 0;
            b.iter(|| {
                let (g, _) = &graphs[i % graphs.len()];
                i += 1;
                black_box(solve_graph(g, catalog, &solver_config(i as u64)).is_ok())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, solve_levels);
criterion_main!(benches);
