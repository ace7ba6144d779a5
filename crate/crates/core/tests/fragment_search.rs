//! Fragment planning, reconstruction and selection.

use forge_core::fragment::*;
use forge_core::graph::{build, BuildConfig, BuildMode, CreateStatement, Node, Producer, TensorRef};
use forge_core::solver::{emit_constraints, solve};
use forge_core::{emit, Attrs, Catalog, EdgeId, EmittedProgram, GlobalLimits, NodeId, ProgramGraph, Shape, SolverConfig};
use proptest::prelude::*;

fn program(level: u32, seed: u64) -> EmittedProgram {
    let catalog = Catalog::standard();
    (seed..)
        .find_map(|s| {
            let g = build(&BuildConfig::new(level, BuildMode::Dag, s).with_order_filter(true), catalog).ok()?;
            let sol = forge_core::solve_graph(&g, catalog, &SolverConfig::with_seed(s)).ok()?;
            emit(&g, &sol, catalog).ok()
        })
        .unwrap()
}

/// conv -> relu -> max pool -> conv -> relu -> max pool on a 32x32 image batch.
fn lenet() -> EmittedProgram {
    let catalog = Catalog::standard();
    let t = |e: u32, p: Producer| TensorRef { edge_id: EdgeId(e), producer: p, integer_typed: false };
    let creates = (0..3).map(|i| CreateStatement { op: "Randn".into(), output: t(i, Producer::Create(i)) }).collect();
    let conv = Attrs { stride: Some(1), padding: Some(0), dilation: Some(1), groups: Some(1), ..Attrs::default() };
    let pool = Attrs { kernel_size: Some(vec![2, 2]), stride: Some(2), padding: Some(0), ..Attrs::default() };
    let plan: [(&str, Vec<u32>, &Attrs); 6] = [
        ("Conv2d", vec![0, 1], &conv),
        ("ReLU", vec![3], &Attrs::default()),
        ("MaxPool2d", vec![4], &pool),
        ("Conv2d", vec![5, 2], &conv),
        ("ReLU", vec![6], &Attrs::default()),
        ("MaxPool2d", vec![7], &pool),
    ];
    let nodes = plan
        .iter()
        .enumerate()
        .map(|(j, (op, ins, a))| Node {
            node_id: NodeId(j as u32),
            op: op.to_string(),
            inputs: ins.iter().map(|&e| EdgeId(e)).collect(),
            output: t(3 + j as u32, Producer::Node(NodeId(j as u32))),
            attrs: (*a).clone(),
        })
        .collect();
    let g = ProgramGraph { create_statements: creates, nodes, outputs: vec![EdgeId(8)] };
    g.validate(catalog).unwrap();
    let mut cs = emit_constraints(&g, catalog, GlobalLimits::default()).unwrap();
    cs.pin(EdgeId(0), Shape::from([4096, 1, 32, 32]))
        .pin(EdgeId(1), Shape::from([6, 1, 5, 5]))
        .pin(EdgeId(2), Shape::from([16, 6, 5, 5]));
    let sol = solve(&cs, &SolverConfig::default()).unwrap();
    assert_eq!(sol.shape(EdgeId(8)), Some(&Shape::from([4096, 16, 5, 5])));
    emit(&g, &sol, catalog).unwrap()
}

#[test]
fn plan_size_matches_closed_form() {
    for n in 1..=2000 {
        let plan = extract(n, DEFAULT_MAX_LEN, DEFAULT_CAP);
        assert_eq!(plan.len(), plan_size(n, DEFAULT_MAX_LEN, DEFAULT_CAP), "n = {n}");
        assert!(plan.windows(2).all(|w| (w[0].len, w[0].start) < (w[1].len, w[1].start)));
        assert!(plan.iter().all(|f| f.start + f.len <= n && (1..=5).contains(&f.len)));
    }
    assert_eq!(extract(5, 5, 1024).len(), 15);
    assert_eq!(extract(20, 5, 1024).len(), 90);
    assert_eq!(extract(300, 5, 1024).len(), 1024);
}

#[test]
fn conv_relu_fragment_becomes_one_call() {
    let p = lenet();
    let f = Fragment { start: 0, len: 2 };
    let b = boundary(&p, f).unwrap();
    assert_eq!(b.inputs, vec![EdgeId(0), EdgeId(1)]);
    assert_eq!(b.outputs, vec![EdgeId(4)]);
    let replacement = "def _triton_fused_operator(tensor_0, tensor_1):\n    return [conv_relu(tensor_0, tensor_1)]\n";
    let hybrid = reconstruct(&p, f, replacement, "_triton_fused_operator").unwrap();
    assert!(hybrid.contains("    tensor_4, = _triton_fused_operator(tensor_0, tensor_1)\n"));

    let (orig, _) = parse_body(&p.source).unwrap();
    let (new, returned) = parse_body(&hybrid).unwrap();
    assert_eq!(new.len(), orig.len() - 1);
    assert_eq!(returned, vec!["tensor_8".to_string()]);
    let body = |src: &str| src.split("def fused_operator").nth(1).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(body(&hybrid)[1..], body(&p.source)[2..]);
}

#[test]
fn wrong_arity_is_a_binding_mismatch() {
    let p = lenet();
    let r = "def k(tensor_0):\n    return [tensor_0]\n";
    assert_eq!(
        reconstruct(&p, Fragment { start: 0, len: 2 }, r, "k"),
        Err(FragmentError::BindingMismatch { expected: 2, found: 1 })
    );
    assert!(matches!(reconstruct(&p, Fragment { start: 5, len: 2 }, r, "k"), Err(FragmentError::FragmentOutOfRange { .. })));
}

/// Substitutes the body of `entry` for its call site in the operator body.
fn inline(hybrid: &str, entry: &str) -> Vec<String> {
    let lines: Vec<&str> = hybrid.lines().collect();
    let def = lines.iter().position(|l| l.starts_with(&format!("def {entry}("))).unwrap();
    let body: Vec<&str> = lines[def + 1..].iter().take_while(|l| !l.trim_start().starts_with("return")).copied().collect();
    let op = lines.iter().position(|l| l.starts_with("def fused_operator(")).unwrap();
    let mut out = Vec::new();
    for l in &lines[op + 1..] {
        if l.contains(&format!("= {entry}(")) {
            out.extend(body.iter().map(|b| b.to_string()));
        } else {
            out.push(l.to_string());
        }
    }
    out
}

fn operator_body(source: &str) -> Vec<String> {
    source.lines().skip_while(|l| !l.starts_with("def fused_operator(")).skip(1).map(String::from).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn pass_through_replacement_preserves_dataflow(level in 1u32..9, seed in 0u64..1000, pick in any::<prop::sample::Index>()) {
        let p = program(level, seed);
        let plan = extract(level as usize, 5, 1024);
        let f = plan[pick.index(plan.len())];
        let r = extract_source(&p, f, "_frag").unwrap();
        let hybrid = reconstruct(&p, f, &r, "_frag").unwrap();
        prop_assert!(parse_body(&hybrid).is_ok());
        prop_assert_eq!(parse_body(&hybrid).unwrap().1, parse_body(&p.source).unwrap().1);
        prop_assert_eq!(inline(&hybrid, "_frag"), operator_body(&p.source));
    }
}

#[test]
fn whole_program_identity_replacement() {
    let p = program(6, 2);
    let f = Fragment { start: 0, len: 5 };
    let r = extract_source(&p, f, "_all").unwrap();
    let hybrid = reconstruct(&p, f, &r, "_all").unwrap();
    assert_eq!(parse_body(&hybrid).unwrap().1, parse_body(&p.source).unwrap().1);
}

struct FuseTwo;

impl Generator for FuseTwo {
    fn generate(&self, program: &EmittedProgram, fragment: Fragment, entry: &str) -> Option<String> {
        (fragment.len == 2).then(|| extract_source(program, fragment, entry).unwrap())
    }
}

#[test]
fn search_picks_earliest_fused_pair() {
    let p = program(5, 0);
    let r = run_search(&p, &FuseTwo, &AlwaysVerified, &StatementCount);
    assert_eq!(r.generator_calls, 15);
    assert_eq!(r.verified_count(), 4);
    let best = r.best.unwrap();
    assert_eq!(best.fragment, Fragment { start: 0, len: 2 });
    assert_eq!(best.measured_time, Some(4.0));
    assert!(r.hybrid.unwrap().contains("= _fused_fragment("));

    let none = run_search(&p, &PassThrough, &NeverVerified, &StatementCount);
    assert!(none.best.is_none());
    assert!(none.log.iter().all(|c| !c.verified && c.measured_time.is_none()));
    assert_eq!(select_best(&none.log), Err(NoneVerified));
}

#[test]
fn search_is_independent_of_thread_count() {
    let p = program(9, 4);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_search(&p, &PassThrough, &AlwaysVerified, &StatementCount));
    let b = four.install(|| run_search(&p, &PassThrough, &AlwaysVerified, &StatementCount));
    assert_eq!(a, b);
    assert_eq!(a.best.unwrap().fragment, Fragment { start: 0, len: 5 });
}
