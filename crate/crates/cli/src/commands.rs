use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use forge_core::dataset::{
    build_benchmark, build_programs, build_stage, manifest_violations, Dataset, DatasetConfig, DatasetError, DatasetManifest, Quota,
};
use forge_core::emit::Origin;
use forge_core::fragment::{
    extract, parse_body, run_search_with, AlwaysVerified, PassThrough, StatementCount, DEFAULT_CAP, DEFAULT_MAX_LEN,
};
use forge_core::reward::{
    drpo_batch_loss, drpo_grad_s, drpo_loss, eval_metrics, grpo_advantage, grpo_reward, sft_loss, EvalRecord, RewardError,
    RewardParams, RolloutGroup, SpeedFn,
};
use forge_core::seed::derive;
use forge_core::solver::SolveError;
use forge_core::{build, emit_with, parse_manifest, solve_graph, BuildConfig, BuildMode, Catalog, EmittedProgram, SolverConfig};
use serde_json::{json, Value};

use crate::{Context, Failure, Output, RewardFlags, SolverFlags};

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::Internal(format!("{}: {e}", path.display()))
}

/// Reads an input file; a missing or unreadable file is a usage error.
fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn apply_solver(solver: &mut SolverConfig, ctx: &Context, flags: &SolverFlags) -> Result<(), Failure> {
    let f = &ctx.file.solver;
    let l = &mut solver.limits;
    l.min_flops = flags.min_flops.or(f.min_flops).unwrap_or(l.min_flops);
    l.max_flops = flags.max_flops.or(f.max_flops).unwrap_or(l.max_flops);
    l.max_size = flags.max_size.or(f.max_size).unwrap_or(l.max_size);
    l.min_size_tensor = flags.min_size_tensor.or(f.min_size_tensor).unwrap_or(l.min_size_tensor);
    solver.time_budget = flags.time_budget.or(f.time_budget).unwrap_or(solver.time_budget);
    solver.max_work = flags.max_work.or(f.max_work).or(solver.max_work);
    if !(solver.time_budget > 0.0 && solver.time_budget.is_finite()) {
        return Err(Failure::Usage(format!("time budget must be positive, got {}", solver.time_budget)));
    }
    if solver.max_work == Some(0) {
        return Err(Failure::Usage("max work must be positive".into()));
    }
    solver.limits.validate().map_err(|e| Failure::Usage(e.to_string()))
}

fn dataset_config(ctx: &Context, flags: &SolverFlags) -> Result<DatasetConfig, Failure> {
    let mut cfg = DatasetConfig::default();
    apply_solver(&mut cfg.solver, ctx, flags)?;
    cfg.retries = flags.retries.or(ctx.file.solver.retries).unwrap_or(cfg.retries);
    cfg.order_filter = flags.order_filter.or(ctx.file.solver.order_filter).unwrap_or(cfg.order_filter);
    if cfg.retries == 0 {
        return Err(Failure::Usage("retries must be at least 1".into()));
    }
    Ok(cfg)
}

/// Runs `f` on a pool of `jobs` threads, or on the global pool.
fn with_jobs<T: Send>(ctx: &Context, jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match jobs.or(ctx.file.jobs) {
        None => Ok(f()),
        Some(0) => Err(Failure::Usage("jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Failure::Internal(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn dataset_failure(e: DatasetError) -> Failure {
    match e {
        DatasetError::GenerationExhausted { .. } | DatasetError::CoverageUnreachable(_) => Failure::Check(e.to_string()),
        DatasetError::UnknownStage(_) | DatasetError::InvalidScale(_) => Failure::Usage(e.to_string()),
        DatasetError::Corrupt { .. } | DatasetError::Io(_) => Failure::Internal(e.to_string()),
    }
}

fn write_dataset(ds: &Dataset, out: &Path) -> Result<Output, Failure> {
    let dir = ds.write(out).map_err(|e| Failure::Internal(format!("{}: {e}", out.display())))?;
    let digest = ds.manifest.digest();
    let programs: Vec<Value> = ds.manifest.entries.iter().map(|e| json!({ "program_id": e.program_id, "path": e.path })).collect();
    let text = format!("wrote {} programs to {} (index sha256 {digest})", programs.len(), dir.display());
    Ok(Output::ok(json!({ "dataset_dir": dir, "count": programs.len(), "index_digest": digest, "programs": programs }), text))
}

pub fn generate(
    ctx: &Context,
    level: u32,
    count: usize,
    mode: BuildMode,
    out: &Path,
    flags: &SolverFlags,
    jobs: Option<usize>,
) -> Result<Output, Failure> {
    if level == 0 || count == 0 {
        return Err(Failure::Usage("level and count must be at least 1".into()));
    }
    let cfg = dataset_config(ctx, flags)?;
    let quota = Quota { level, count, mode };
    let ds = with_jobs(ctx, jobs, || build_programs("generated", quota, ctx.seed, &cfg, Catalog::standard()))?.map_err(dataset_failure)?;
    write_dataset(&ds, out)
}

pub fn stage(ctx: &Context, stage: u8, scale: f64, out: &Path, flags: &SolverFlags, jobs: Option<usize>) -> Result<Output, Failure> {
    let cfg = dataset_config(ctx, flags)?;
    let ds = with_jobs(ctx, jobs, || build_stage(stage, scale, ctx.seed, &cfg, Catalog::standard()))?.map_err(dataset_failure)?;
    write_dataset(&ds, out)
}

pub fn benchmark(ctx: &Context, out: &Path, exclude: &[PathBuf], flags: &SolverFlags, jobs: Option<usize>) -> Result<Output, Failure> {
    let cfg = dataset_config(ctx, flags)?;
    let mut hashes = BTreeSet::new();
    for dir in exclude {
        let index = dir.join("index.json");
        let m: DatasetManifest =
            serde_json::from_str(&read_input(&index)?).map_err(|e| Failure::Usage(format!("{}: {e}", index.display())))?;
        hashes.extend(m.hashes());
    }
    let ds = with_jobs(ctx, jobs, || build_benchmark(ctx.seed, &cfg, Catalog::standard(), &hashes))?.map_err(dataset_failure)?;
    write_dataset(&ds, out)
}

/// The manifest path for a program given by its manifest or its source.
fn manifest_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "py") {
        path.with_extension("json")
    } else {
        path.to_path_buf()
    }
}

/// Problems with one program: manifest soundness, then agreement of any
/// source file beside it with a fresh emission.
fn program_problems(path: &Path, catalog: &Catalog) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let m = match parse_manifest(&text) {
        Ok(m) => m,
        Err(e) => return Ok(vec![format!("malformed manifest: {e}")]),
    };
    let mut problems = manifest_violations(&m, catalog);
    let source_path = path.with_extension("py");
    if problems.is_empty() && source_path.is_file() {
        let source = fs::read_to_string(&source_path).map_err(|e| io_error(&source_path, e))?;
        let origin = Origin { program_id: m.program_id.clone(), seed: m.seed, limits: m.limits };
        match emit_with(&m.graph, &m.solution(), catalog, &origin) {
            Ok(p) if p.source == source => {}
            Ok(_) => problems.push(format!("source: {} differs from the program its manifest describes", source_path.display())),
            Err(e) => problems.push(format!("source: {e}")),
        }
    }
    Ok(problems)
}

pub fn verify(paths: &[PathBuf]) -> Result<Output, Failure> {
    let paths: Vec<PathBuf> = paths.iter().map(|p| manifest_path(p)).collect();
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        return Err(Failure::Usage(format!("{}: no such file", missing.display())));
    }
    let catalog = Catalog::standard();
    let mut reports = Vec::with_capacity(paths.len());
    let mut text = String::new();
    let mut failed = 0;
    for path in &paths {
        let problems = program_problems(path, catalog)?;
        if problems.is_empty() {
            text.push_str(&format!("{}: ok\n", path.display()));
        } else {
            failed += 1;
            text.push_str(&format!("{}: {} problem(s)\n", path.display(), problems.len()));
            for p in &problems {
                text.push_str(&format!("  - {p}\n"));
            }
        }
        reports.push(json!({ "path": path, "ok": problems.is_empty(), "problems": problems }));
    }
    let json = json!({ "checked": paths.len(), "failed": failed, "programs": reports });
    Ok(Output { json, text, code: u8::from(failed > 0) })
}

fn fragment_limits(ctx: &Context, cap: Option<usize>, max_len: Option<usize>) -> Result<(usize, usize), Failure> {
    let cap = cap.or(ctx.file.fragments.cap).unwrap_or(DEFAULT_CAP);
    let max_len = max_len.or(ctx.file.fragments.max_len).unwrap_or(DEFAULT_MAX_LEN);
    if cap == 0 || max_len == 0 {
        return Err(Failure::Usage("cap and max length must be at least 1".into()));
    }
    Ok((cap, max_len))
}

/// Loads a program from its manifest and source, which sit side by side.
fn load_program(path: &Path) -> Result<EmittedProgram, Failure> {
    let json_path = manifest_path(path);
    let source_path = json_path.with_extension("py");
    let manifest = parse_manifest(&read_input(&json_path)?).map_err(|e| Failure::Usage(format!("{}: {e}", json_path.display())))?;
    let source = read_input(&source_path)?;
    parse_body(&source).map_err(|e| Failure::Usage(format!("{}: {e}", source_path.display())))?;
    Ok(EmittedProgram { source, manifest })
}

/// Statement count of a program given by its manifest or its source.
fn statement_count(path: &Path) -> Result<usize, Failure> {
    let text = read_input(path)?;
    if path.extension().is_some_and(|e| e == "py") {
        let (stmts, _) = parse_body(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        Ok(stmts.len())
    } else {
        let m = parse_manifest(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        Ok(m.level as usize)
    }
}

pub fn fragments(ctx: &Context, n: Option<usize>, program: Option<&Path>, cap: Option<usize>, max_len: Option<usize>) -> Result<Output, Failure> {
    let (cap, max_len) = fragment_limits(ctx, cap, max_len)?;
    let n = match (n, program) {
        (Some(n), _) => n,
        (None, Some(p)) => statement_count(p)?,
        (None, None) => return Err(Failure::Usage("give --n or a program".into())),
    };
    let plan = extract(n, max_len, cap);
    let mut text = format!("{} fragments for {n} statements (max length {max_len}, cap {cap})\n", plan.len());
    for f in &plan {
        text.push_str(&format!("{} {}\n", f.start, f.len));
    }
    Ok(Output::ok(json!({ "n": n, "max_len": max_len, "cap": cap, "count": plan.len(), "fragments": plan }), text))
}

pub fn search(ctx: &Context, program: &Path, cap: Option<usize>, max_len: Option<usize>) -> Result<Output, Failure> {
    let (cap, max_len) = fragment_limits(ctx, cap, max_len)?;
    let p = load_program(program)?;
    let r = run_search_with(&p, &PassThrough, &AlwaysVerified, &StatementCount, max_len, cap);
    let log: Vec<Value> =
        r.log.iter().map(|c| json!({ "fragment": c.fragment, "verified": c.verified, "measured_time": c.measured_time })).collect();
    let best = r.best.as_ref().map(|b| json!({ "fragment": b.fragment, "measured_time": b.measured_time }));
    let json = json!({
        "plan_size": r.plan_size,
        "generator_calls": r.generator_calls,
        "verified": r.verified_count(),
        "candidates": log,
        "best": best,
        "hybrid": r.hybrid,
    });
    let mut text = format!("{} fragments, {} generator calls, {} verified\n", r.plan_size, r.generator_calls, r.verified_count());
    match (&r.best, &r.hybrid) {
        (Some(b), Some(h)) => {
            let cost = b.measured_time.unwrap_or(f64::NAN);
            text.push_str(&format!("best: start {} length {} cost {cost}\n\n{h}", b.fragment.start, b.fragment.len));
        }
        _ => text.push_str("no verified candidate\n"),
    }
    let code = u8::from(r.best.is_none());
    Ok(Output { json, text, code })
}

fn reward_params(ctx: &Context, flags: &RewardFlags) -> Result<(RewardParams, f64), Failure> {
    let f = &ctx.file.reward;
    let d = RewardParams::default();
    let speed = match flags.alpha.or(f.alpha) {
        Some(alpha) => SpeedFn::Power { alpha },
        None => d.speed,
    };
    let p = RewardParams {
        tau: flags.tau.or(f.tau).unwrap_or(d.tau),
        lambda: flags.lambda.or(f.lambda).unwrap_or(d.lambda),
        beta: flags.beta.or(f.beta).unwrap_or(d.beta),
        delta: flags.delta.or(f.delta).unwrap_or(d.delta),
        speed,
    };
    p.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let kl = flags.kl.or(f.kl).unwrap_or(0.0);
    if !(kl >= 0.0 && kl.is_finite()) {
        return Err(Failure::Usage(format!("kl must be non-negative, got {kl}")));
    }
    Ok((p, kl))
}

fn reward_failure(e: RewardError) -> Failure {
    Failure::Usage(e.to_string())
}

/// One rollout group, or an array of them.
fn read_groups(path: &Path) -> Result<Vec<RolloutGroup>, Failure> {
    let malformed = |e: serde_json::Error| Failure::Usage(format!("{}: malformed JSON: {e}", path.display()));
    let v: Value = serde_json::from_str(&read_input(path)?).map_err(malformed)?;
    let groups = if v.is_array() { serde_json::from_value(v).map_err(malformed)? } else { vec![serde_json::from_value(v).map_err(malformed)?] };
    if groups.is_empty() {
        return Err(Failure::Usage(format!("{}: no rollout groups", path.display())));
    }
    Ok(groups)
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn reward(ctx: &Context, file: &Path, loss: crate::LossArg, flags: &RewardFlags) -> Result<Output, Failure> {
    let (params, kl) = reward_params(ctx, flags)?;
    let groups = read_groups(file)?;
    let speed = match params.speed {
        SpeedFn::Log => "log".to_string(),
        SpeedFn::Power { alpha } => format!("power(alpha={alpha})"),
    };
    let mut text = format!(
        "params: beta={} tau={} lambda={} delta={} speed={speed} kl={kl}\n",
        params.beta, params.tau, params.lambda, params.delta
    );
    let mut json = json!({ "params": params, "kl": kl });
    match loss {
        crate::LossArg::Drpo => {
            let mut per = Vec::new();
            for (i, g) in groups.iter().enumerate() {
                let l = drpo_loss(g, kl, &params).map_err(reward_failure)?;
                let grad = drpo_grad_s(g, &params).map_err(reward_failure)?;
                text.push_str(&format!("group {i}: loss {l} grad_s {}\n", join(&grad)));
                per.push(json!({ "query": g.query, "loss": l, "grad_s": grad }));
            }
            let batch = drpo_batch_loss(&groups, kl, &params).map_err(reward_failure)?;
            text.push_str(&format!("batch loss {batch}\n"));
            json["loss"] = json!("drpo");
            json["batch_loss"] = json!(batch);
            json["groups"] = json!(per);
        }
        crate::LossArg::Grpo => {
            let mut per = Vec::new();
            for (i, g) in groups.iter().enumerate() {
                let rewards =
                    g.outputs.iter().map(|o| grpo_reward(o.correct, o.t_torch, o.t_triton, params.speed)).collect::<Result<Vec<_>, _>>();
                let rewards = rewards.map_err(reward_failure)?;
                let adv = grpo_advantage(&rewards).map_err(reward_failure)?;
                text.push_str(&format!("group {i}: rewards {} advantages {}\n", join(&rewards), join(&adv)));
                per.push(json!({ "query": g.query, "rewards": rewards, "advantages": adv }));
            }
            json["loss"] = json!("grpo");
            json["groups"] = json!(per);
        }
        crate::LossArg::Sft => {
            let s: Vec<f64> = groups.iter().flat_map(|g| g.outputs.iter().map(|o| o.s)).collect();
            let l = sft_loss(&s).map_err(reward_failure)?;
            text.push_str(&format!("sft loss {l}\n"));
            json["loss"] = json!("sft");
            json["sft_loss"] = json!(l);
        }
    }
    Ok(Output::ok(json, text))
}

pub fn metrics(file: &Path) -> Result<Output, Failure> {
    let records: Vec<EvalRecord> =
        serde_json::from_str(&read_input(file)?).map_err(|e| Failure::Usage(format!("{}: malformed JSON: {e}", file.display())))?;
    let m = eval_metrics(&records).map_err(reward_failure)?;
    let geo = m.geomean_speedup.map_or("n/a".to_string(), |g| g.to_string());
    let text = format!("records {} acc {}% faster1 {}% geomean speedup {geo}", records.len(), m.acc, m.faster1);
    Ok(Output::ok(json!({ "records": records.len(), "metrics": m }), text))
}

fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn bench_solver(ctx: &Context, level: u32, trials: usize, mode: BuildMode, flags: &SolverFlags) -> Result<Output, Failure> {
    if level == 0 || trials == 0 {
        return Err(Failure::Usage("level and trials must be at least 1".into()));
    }
    let mut base = SolverConfig { time_budget: 60.0, ..SolverConfig::default() };
    apply_solver(&mut base, ctx, flags)?;
    let order_filter = flags.order_filter.or(ctx.file.solver.order_filter).unwrap_or(true);
    let catalog = Catalog::standard();
    let (mut ok, mut infeasible, mut timed_out, mut exhausted, mut build_failed) = (0, 0, 0, 0, 0);
    let mut times = Vec::with_capacity(trials);
    for t in 0..trials {
        let s = derive(ctx.seed, &[t as u64]);
        let Ok(graph) = build(&BuildConfig::new(level, mode, s).with_order_filter(order_filter), catalog) else {
            build_failed += 1;
            continue;
        };
        let cfg = SolverConfig { seed: s, ..base };
        let start = Instant::now();
        let r = solve_graph(&graph, catalog, &cfg);
        times.push(start.elapsed().as_secs_f64());
        match r {
            Ok(_) => ok += 1,
            Err(SolveError::Infeasible(_)) => infeasible += 1,
            Err(SolveError::TimedOut(_)) => timed_out += 1,
            Err(SolveError::WorkExhausted(_)) => exhausted += 1,
            Err(e) => return Err(Failure::Internal(e.to_string())),
        }
    }
    times.sort_by(f64::total_cmp);
    let median = percentile(&times, 0.5);
    let p95 = percentile(&times, 0.95);
    let mean = (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64);
    let max = times.last().copied();
    let json = json!({
        "level": level, "mode": mode, "trials": trials,
        "ok": ok, "infeasible": infeasible, "timed_out": timed_out, "work_exhausted": exhausted, "build_failed": build_failed,
        "median_s": median, "p95_s": p95, "mean_s": mean, "max_s": max,
    });
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let text = format!(
        "level {level}, {trials} trials: {ok} solved, {infeasible} infeasible, {timed_out} timed out, {exhausted} out of work, {build_failed} unbuildable\nmedian {} s, p95 {} s, mean {} s, max {} s",
        fmt(median),
        fmt(p95),
        fmt(mean),
        fmt(max)
    );
    Ok(Output::ok(json, text))
}

pub fn catalog() -> Output {
    let c = Catalog::standard();
    let mut text = format!("{} compute and {} create operators\n", c.compute_ops.len(), c.create_ops.len());
    for op in c.compute_ops.iter().chain(&c.create_ops) {
        text.push_str(&format!("{:<24} {:<36} {:?} {:?}\n", op.name, op.qualified_name, op.category, op.arity));
    }
    Output::ok(json!({ "compute": c.compute_ops, "create": c.create_ops }), text)
}
