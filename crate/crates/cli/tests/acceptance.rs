//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use forge_core::dataset::{build_benchmark, build_programs, build_stage, manifest_violations, DatasetConfig, Quota};
use forge_core::fragment::{extract, Fragment};
use forge_core::graph::{build, BuildConfig, BuildMode};
use forge_core::oracle::broadcast_shapes;
use forge_core::reward::*;
use forge_core::seed::derive;
use forge_core::shape::MAX_DIM;
use forge_core::solver::{emit_constraints, solve, SolveError};
use forge_core::{solve_graph, Catalog, GlobalLimits, Shape, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn validity() -> Verdict {
    let catalog = Catalog::standard();
    let cfg = DatasetConfig::default();
    let quotas = [(1, 1000, BuildMode::Chain), (2, 1000, BuildMode::Chain), (5, 1000, BuildMode::Chain), (20, 200, BuildMode::Dag)];
    let mut total = 0;
    let mut bad = Vec::new();
    for (level, count, mode) in quotas {
        let ds = build_programs("validity", Quota { level, count, mode }, 11, &cfg, catalog).map_err(|e| e.to_string())?;
        if ds.programs.len() != count {
            return Err(format!("level {level}: {} of {count} programs", ds.programs.len()));
        }
        for p in &ds.programs {
            total += 1;
            let m = &p.manifest;
            let mut problems = manifest_violations(m, catalog);
            if let Some(d) = m.shapes.values().flat_map(|s| s.dims().iter()).find(|&&d| !(1..=MAX_DIM).contains(&d)) {
                problems.push(format!("dimension {d} out of range"));
            }
            if !problems.is_empty() {
                bad.push(format!("{}: {}", m.program_id, problems[0]));
            }
        }
    }
    match bad.first() {
        None => Ok(format!("{total} programs pass checker and oracle, all dims in [1, {MAX_DIM}]")),
        Some(first) => Err(format!("{} of {total} failed, first: {first}", bad.len())),
    }
}

fn solver_speed() -> Verdict {
    let catalog = Catalog::standard();
    let mut times = Vec::new();
    let mut outcomes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut t = 0u64;
    while times.len() < 50 {
        let s = derive(2024, &[t]);
        t += 1;
        let Ok(g) = build(&BuildConfig::new(20, BuildMode::Dag, s).with_order_filter(true), catalog) else { continue };
        let cfg = SolverConfig { seed: s, time_budget: 10.0, ..SolverConfig::default() };
        let start = Instant::now();
        let r = solve_graph(&g, catalog, &cfg);
        times.push(start.elapsed().as_secs_f64());
        let key = match r {
            Ok(_) => "solved",
            Err(SolveError::Infeasible(_)) => "infeasible",
            Err(_) => "budget",
        };
        *outcomes.entry(key).or_default() += 1;
    }
    times.sort_by(f64::total_cmp);
    let median = times[24];
    let p95 = times[47];
    let msg = format!("median {median:.4} s, p95 {p95:.4} s over 50 solves {outcomes:?}");
    if median <= 2.0 && p95 <= 5.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn coverage() -> Verdict {
    let catalog = Catalog::standard();
    let ds = build_benchmark(0, &DatasetConfig::default(), catalog, &Default::default()).map_err(|e| e.to_string())?;
    let mut per_op: BTreeMap<&str, usize> = BTreeMap::new();
    for p in ds.programs.iter().filter(|p| p.manifest.level == 1) {
        *per_op.entry(p.manifest.ops[0].as_str()).or_default() += 1;
    }
    let missing: Vec<&str> =
        catalog.compute_ops.iter().map(|o| o.name.as_str()).filter(|n| per_op.get(n).copied().unwrap_or(0) < 2).collect();
    if missing.is_empty() {
        Ok(format!("{} operators x 2 level-1 programs, {} programs in total", catalog.compute_ops.len(), ds.programs.len()))
    } else {
        Err(format!("operators without 2 programs: {missing:?}"))
    }
}

fn fragments() -> Verdict {
    for n in 1..=2000usize {
        let mut expected = Vec::new();
        for len in 1..=5 {
            for start in 0..(n + 1).saturating_sub(len) {
                expected.push(Fragment { start, len });
            }
        }
        expected.truncate(1024);
        let closed = (1..=5usize).map(|l| (n + 1).saturating_sub(l)).sum::<usize>().min(1024);
        let got = extract(n, 5, 1024);
        if got != expected || got.len() != closed {
            return Err(format!("n = {n}: {} fragments, closed form {closed}", got.len()));
        }
    }
    let spots: Vec<usize> = [5, 20, 300].iter().map(|&n| extract(n, 5, 1024).len()).collect();
    if spots != [15, 90, 1024] {
        return Err(format!("spot values {spots:?}"));
    }
    Ok("n in [1, 2000] match the closed form; 5 -> 15, 20 -> 90, 300 -> 1024".into())
}

fn reward_math() -> Verdict {
    let params = RewardParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        let outputs = (0..8)
            .map(|_| Rollout {
                s: rng.random_range(-3.0..0.0),
                correct: rng.random_bool(0.5),
                t_torch: rng.random_range(0.1..2.0),
                t_triton: rng.random_range(0.1..2.0),
            })
            .collect();
        let g = RolloutGroup { query: String::new(), outputs };
        let grad = drpo_grad_s(&g, &params).map_err(|e| e.to_string())?;
        let fd: Vec<f64> = (0..8)
            .map(|i| {
                let (mut up, mut down) = (g.clone(), g.clone());
                up.outputs[i].s += h;
                down.outputs[i].s -= h;
                (drpo_loss(&up, 0.0, &params).unwrap() - drpo_loss(&down, 0.0, &params).unwrap()) / (2.0 * h)
            })
            .collect();
        let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);

        let rewards: Vec<f64> = g.outputs.iter().map(|o| speed_reward(o.t_torch, o.t_triton, SpeedFn::Log).unwrap()).collect();
        let w = correct_weights(&rewards, params.lambda).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    let adv = grpo_advantage(&[0.0, 0.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
    let hinge = kl_hinge(params.delta, &params);
    let msg = format!("gradient rel. error {worst:.2e}, weight sum error {worst_sum:.2e}, advantage {adv:?}, hinge at delta {hinge}");
    if worst <= 1e-6 && worst_sum <= 1e-12 && adv == [-1.0, -1.0, 1.0, 1.0] && hinge == 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn metrics() -> Verdict {
    let records = [EvalRecord { correct: true, speedup: Some(2.0) }, EvalRecord { correct: true, speedup: Some(0.5) }];
    let m = eval_metrics(&records).map_err(|e| e.to_string())?;
    let geo = m.geomean_speedup.unwrap_or(f64::NAN);
    let msg = format!("geomean {geo}, Faster1 {}%", m.faster1);
    if (geo - 1.0).abs() <= 1e-12 && m.faster1 == 50.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Digest of every file under `root`, keyed by relative path.
fn tree_digest(root: &Path) -> String {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, Sha256::digest(std::fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    let mut files = BTreeMap::new();
    walk(root, root, &mut files);
    let mut h = Sha256::new();
    for (k, v) in &files {
        h.update(k.as_bytes());
        h.update(v);
    }
    format!("{} files, {}", files.len(), hex::encode(h.finalize()))
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        for (level, count) in [("1", "3"), ("5", "40")] {
            let status = Command::new(env!("CARGO_BIN_EXE_forge"))
                .args(["generate", "--level", level, "--count", count, "--seed", "7", "--out"])
                .arg(out.join(format!("l{level}")))
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(String::from_utf8_lossy(&status.stderr).into_owned());
            }
        }
        digests.push(tree_digest(&out));
    }
    if digests[0] == digests[1] {
        Ok(format!("two runs give identical trees ({})", digests[0]))
    } else {
        Err(format!("{} vs {}", digests[0], digests[1]))
    }
}

fn curriculum() -> Verdict {
    let catalog = Catalog::standard();
    let mut counts = Vec::new();
    for stage in 1..=3 {
        let ds = build_stage(stage, 0.01, 3, &DatasetConfig::default(), catalog).map_err(|e| e.to_string())?;
        counts.push(ds.programs.len());
    }
    let msg = format!("stages 1/2/3 at scale 0.01: {counts:?}");
    if counts == [200, 600, 200] {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn small_shapes() -> Vec<Vec<u32>> {
    let mut all = vec![vec![]];
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..3 {
        let next: Vec<Vec<u32>> = frontier.iter().flat_map(|s| (1..=3).map(move |d| [s.clone(), vec![d]].concat())).collect();
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

fn broadcast() -> Verdict {
    let catalog = Catalog::standard();
    let g = build(&BuildConfig::new(1, BuildMode::Dag, 0).with_subset(["Add"]), catalog).map_err(|e| e.to_string())?;
    let (a, b) = (g.nodes[0].inputs[0], g.nodes[0].inputs[1]);
    let limits = GlobalLimits { min_flops: 0, min_size_tensor: 1, ..GlobalLimits::default() };
    let base = emit_constraints(&g, catalog, limits).map_err(|e| e.to_string())?;
    let all = small_shapes();
    let mut mismatches = 0;
    let mut feasible = 0;
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
            feasible += usize::from(expected.is_ok());
            mismatches += usize::from(!agree);
        }
    }
    let msg = format!("{} pairs ({feasible} broadcastable), {mismatches} mismatches", all.len() * all.len());
    if mismatches == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("validity at scale", validity),
        ("solver speed", solver_speed),
        ("operator coverage", coverage),
        ("fragment combinatorics", fragments),
        ("reward math", reward_math),
        ("metrics", metrics),
        ("determinism", determinism),
        ("curriculum manifests", curriculum),
        ("brute-force broadcast equivalence", broadcast),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let verdict = f();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(m) => println!("PASS {name}: {m} ({secs:.1} s)"),
            Err(m) => {
                failed += 1;
                println!("FAIL {name}: {m} ({secs:.1} s)");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
