//! Emitted source follows the statement grammar and manifests round-trip.

use forge_core::dataset::{build_benchmark, build_stage, load, solved_hash, DatasetConfig};
use forge_core::emit::{parse_manifest, EmitError};
use forge_core::fragment::parse_body;
use forge_core::graph::{build, BuildConfig, BuildMode};
use forge_core::{emit, solve_graph, Catalog, SolverConfig};
use proptest::prelude::*;
use std::collections::BTreeMap;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn source_is_one_call_per_node(level in 1u32..21, chain in any::<bool>(), seed in any::<u64>()) {
        let catalog = Catalog::standard();
        let mode = if chain { BuildMode::Chain } else { BuildMode::Dag };
        let g = build(&BuildConfig::new(level, mode, seed).with_order_filter(true), catalog).unwrap();
        let Ok(sol) = solve_graph(&g, catalog, &SolverConfig { seed, time_budget: 2.0, ..SolverConfig::default() }) else {
            return Ok(());
        };
        let p = emit(&g, &sol, catalog).unwrap();
        let (stmts, returned) = parse_body(&p.source).map_err(TestCaseError::fail)?;
        prop_assert_eq!(stmts.len() as u32, level);
        let outputs: Vec<String> = g.outputs.iter().map(|e| e.to_string()).collect();
        prop_assert_eq!(returned, outputs);
        for (s, n) in stmts.iter().zip(&g.nodes) {
            prop_assert_eq!(&s.defs, &vec![n.output.edge_id.to_string()]);
        }
        prop_assert_eq!(p.source.matches("def ").count(), 2);

        let m = parse_manifest(&p.manifest.to_json()).unwrap();
        prop_assert_eq!(m.level as usize, g.nodes.len());
        prop_assert_eq!(&m, &p.manifest);
        prop_assert_eq!(emit(&g, &sol, catalog).unwrap().source, p.source);
    }
}

#[test]
fn inconsistent_manifest_is_rejected() {
    let catalog = Catalog::standard();
    let g = build(&BuildConfig::new(3, BuildMode::Chain, 1), catalog).unwrap();
    let sol = solve_graph(&g, catalog, &SolverConfig::with_seed(1)).unwrap();
    let mut m = emit(&g, &sol, catalog).unwrap().manifest;
    m.level = 4;
    assert!(parse_manifest(&m.to_json()).is_err());
    assert!(parse_manifest("{\"program_id\": ").is_err());
}

#[test]
fn attribute_mismatch_is_unverified() {
    let catalog = Catalog::standard();
    let g = build(&BuildConfig::new(1, BuildMode::Dag, 2).with_subset(["Conv2d"]), catalog).unwrap();
    let mut sol = solve_graph(&g, catalog, &SolverConfig::with_seed(2)).unwrap();
    let a = sol.attrs.values_mut().next().unwrap();
    a.stride = Some(a.stride.unwrap() % 4 + 1);
    a.padding = Some(a.padding.unwrap() % 3 + 1);
    assert!(matches!(emit(&g, &sol, catalog), Err(EmitError::UnverifiedSolution(_))));
}

#[test]
fn benchmark_covers_every_operator_twice_and_avoids_training_programs() {
    let catalog = Catalog::standard();
    let cfg = DatasetConfig::default();
    let train = build_stage(1, 0.01, 5, &cfg, catalog).unwrap();
    assert_eq!(train.manifest.entries.len(), 200);
    let bench = build_benchmark(5, &cfg, catalog, &train.manifest.hashes()).unwrap();
    assert_eq!(bench.manifest.entries.len(), 2 * catalog.compute_ops.len() + 300);
    assert!(train.manifest.hashes().is_disjoint(&bench.manifest.hashes()));
    assert_eq!(bench.manifest.hashes().len(), bench.manifest.entries.len());

    let mut per_op: BTreeMap<&str, usize> = BTreeMap::new();
    for p in bench.programs.iter().filter(|p| p.manifest.level == 1) {
        *per_op.entry(p.manifest.ops[0].as_str()).or_default() += 1;
    }
    assert_eq!(per_op.len(), catalog.compute_ops.len());
    assert!(per_op.values().all(|&c| c == 2));
    for p in &bench.programs {
        assert_eq!(solved_hash(&p.manifest), bench.manifest.entries.iter().find(|e| e.program_id == p.manifest.program_id).unwrap().structural_hash);
    }

    let tmp = tempfile::tempdir().unwrap();
    let dir = bench.write(tmp.path()).unwrap();
    assert!(dir.join("20").is_dir() && dir.join("index.json").is_file());
    let back = load(&dir, catalog).unwrap();
    assert_eq!(back.manifest.digest(), bench.manifest.digest());

    let again = build_benchmark(5, &cfg, catalog, &train.manifest.hashes()).unwrap();
    assert_eq!(again.manifest.digest(), bench.manifest.digest());
}

#[test]
fn tampered_dataset_fails_to_load() {
    let catalog = Catalog::standard();
    let d = build_stage(3, 0.0002, 1, &DatasetConfig::default(), catalog).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = d.write(tmp.path()).unwrap();
    let src = dir.join(&d.manifest.entries[0].path);
    let text = std::fs::read_to_string(&src).unwrap();
    std::fs::write(&src, text.replace("torch.", "torch .")).unwrap();
    assert!(load(&dir, catalog).is_err());
}
