//! Structural invariants of randomly built graphs.

use std::collections::BTreeSet;

use forge_core::graph::{build, structural_hash, BuildConfig, BuildMode, Producer};
use forge_core::{Catalog, EdgeId};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn graphs_are_well_formed(level in 1u32..25, chain in any::<bool>(), filter in any::<bool>(), seed in any::<u64>()) {
        let catalog = Catalog::standard();
        let mode = if chain { BuildMode::Chain } else { BuildMode::Dag };
        let g = build(&BuildConfig::new(level, mode, seed).with_order_filter(filter), catalog).unwrap();
        g.validate(catalog).unwrap();
        prop_assert_eq!(g.level(), level);
        prop_assert_eq!(g.edge_count(), g.create_statements.len() + g.nodes.len());

        // Edge ids are dense.
        let ids: BTreeSet<EdgeId> = g.edges().iter().map(|t| t.edge_id).collect();
        prop_assert_eq!(ids.len(), g.edge_count());
        prop_assert_eq!(ids.iter().next_back().map(|e| e.0 as usize + 1), Some(g.edge_count()));

        // Every created tensor is read by some node.
        let read: BTreeSet<EdgeId> = g.nodes.iter().flat_map(|n| n.inputs.iter().copied()).collect();
        for c in &g.create_statements {
            prop_assert!(read.contains(&c.output.edge_id));
        }
        if chain {
            for w in g.nodes.windows(2) {
                prop_assert_eq!(w[1].inputs[0], w[0].output.edge_id);
            }
        }
        for n in &g.nodes {
            prop_assert_eq!(n.output.producer, Producer::Node(n.node_id));
            let spec = catalog.lookup(&n.op).unwrap();
            prop_assert_eq!(n.output.integer_typed, spec.integer_output);
        }
    }

    #[test]
    fn builds_are_reproducible(level in 1u32..12, seed in any::<u64>()) {
        let catalog = Catalog::standard();
        let cfg = BuildConfig::new(level, BuildMode::Dag, seed).with_order_filter(true);
        let a = build(&cfg, catalog).unwrap();
        let b = build(&cfg, catalog).unwrap();
        prop_assert_eq!(structural_hash(&a), structural_hash(&b));
        prop_assert_eq!(a, b);
    }
}

#[test]
fn subsets_restrict_operators() {
    let catalog = Catalog::standard();
    for seed in 0..50 {
        let g = build(&BuildConfig::new(8, BuildMode::Dag, seed).with_subset(["ReLU", "Add", "Cat"]), catalog).unwrap();
        assert!(g.nodes.iter().all(|n| ["ReLU", "Add", "Cat"].contains(&n.op.as_str())));
    }
}
