//! Curriculum stages and the held-out benchmark.
//!
//! Every program slot draws its seeds from the dataset seed and its slot index,
//! so slots are generated in parallel and assembled in slot order. A slot
//! rebuilds with a fresh derived seed when its graph is infeasible, runs out
//! of solver budget, or duplicates an earlier program.
//!
//! On disk a dataset lives at `<root>/<name>/`: an `index.json` listing every
//! entry, and per-level directories `<level>/` holding `program_<id>.py` and
//! `program_<id>.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::emit::{emit_with, parse_manifest, sha256_hex, EmittedProgram, Manifest, Origin};
use crate::graph::{build, BuildConfig, BuildMode, Producer};
use crate::oracle::{verify_program, ReportStatus};
use crate::seed::derive;
use crate::solver::{check, emit_constraints, solve_graph, SolverConfig};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown stage {0} (expected 1, 2 or 3)")]
    UnknownStage(u8),
    #[error("scale {0} must be in (0, 1]")]
    InvalidScale(f64),
    #[error("{dataset}: slot {slot} at level {level} failed {attempts} attempts ({produced} programs done)")]
    GenerationExhausted { dataset: String, level: u32, slot: usize, attempts: u32, produced: usize },
    #[error("operator `{0}` has no feasible level-1 program")]
    CoverageUnreachable(String),
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: u8,
    pub level: u32,
    pub count: usize,
    pub mode: BuildMode,
}

/// Level and full-scale size of a curriculum stage.
pub fn stage_spec(stage: u8) -> Result<StageSpec, DatasetError> {
    let (level, count) = match stage {
        1 => (1, 20_000),
        2 => (2, 60_000),
        3 => (5, 20_000),
        s => return Err(DatasetError::UnknownStage(s)),
    };
    Ok(StageSpec { stage, level, count, mode: BuildMode::Chain })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub level: u32,
    pub count: usize,
    pub mode: BuildMode,
}

/// Benchmark quotas: two single-operator programs per compute operator, then
/// 100 programs at each of levels 2, 5 and 20.
pub fn benchmark_spec(catalog: &Catalog) -> Vec<Quota> {
    let mut q = vec![Quota { level: 1, count: 2 * catalog.compute_ops.len(), mode: BuildMode::Dag }];
    q.extend([2, 5, 20].map(|level| Quota { level, count: 100, mode: BuildMode::Dag }));
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub solver: SolverConfig,
    /// Attempts per slot before giving up.
    pub retries: u32,
    pub order_filter: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let solver = SolverConfig { time_budget: 60.0, max_work: Some(50_000), ..SolverConfig::default() };
        DatasetConfig { solver, retries: 16, order_filter: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub program_id: String,
    pub level: u32,
    /// Digest of operators, wiring, attributes and shapes.
    pub structural_hash: String,
    pub source_digest: String,
    pub manifest_digest: String,
    /// Source path relative to the dataset directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub quotas: Vec<Quota>,
    pub config: DatasetConfig,
    pub entries: Vec<Entry>,
}

impl DatasetManifest {
    pub fn hashes(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.structural_hash.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub programs: Vec<EmittedProgram>,
}

/// Digest of a solved program that ignores edge numbering.
pub fn solved_hash(m: &Manifest) -> String {
    let mut text = m.graph.canonical_encoding();
    for t in m.graph.create_statements.iter().map(|c| c.output).chain(m.graph.nodes.iter().map(|n| n.output)) {
        let shape = m.shapes.get(&t.edge_id).map(|s| s.to_string()).unwrap_or_default();
        let tag = match t.producer {
            Producer::Create(i) => format!("c{i}"),
            Producer::Node(n) => format!("n{}", n.0),
        };
        text.push_str(&format!(";{tag}:{shape}"));
    }
    sha256_hex(text.as_bytes())
}

/// One slot of a dataset: where its seeds come from and what it must hold.
#[derive(Debug, Clone)]
struct Slot {
    index: usize,
    level: u32,
    mode: BuildMode,
    subset: Option<String>,
}

struct Built {
    program: EmittedProgram,
    hash: String,
}

fn dataset_tag(name: &str) -> u64 {
    u64::from_be_bytes(sha256_hex(name.as_bytes()).as_bytes()[..8].try_into().expect("8 bytes"))
}

fn attempt(name: &str, seed: u64, slot: &Slot, k: u32, cfg: &DatasetConfig, catalog: &Catalog) -> Option<Built> {
    let s = derive(seed, &[dataset_tag(name), u64::from(slot.level), slot.index as u64, u64::from(k)]);
    let mut bc = BuildConfig::new(slot.level, slot.mode, s).with_order_filter(cfg.order_filter);
    if let Some(op) = &slot.subset {
        bc = bc.with_subset([op.clone()]);
    }
    let graph = build(&bc, catalog).ok()?;
    let solver = SolverConfig { seed: s, ..cfg.solver };
    let solution = solve_graph(&graph, catalog, &solver).ok()?;
    let origin = Origin { program_id: format!("{name}_l{}_{:05}", slot.level, slot.index), seed: s, limits: cfg.solver.limits };
    let program = emit_with(&graph, &solution, catalog, &origin).ok()?;
    let hash = solved_hash(&program.manifest);
    Some(Built { program, hash })
}

fn generate(
    name: &str,
    seed: u64,
    slots: &[Slot],
    cfg: &DatasetConfig,
    catalog: &Catalog,
    exclude: &BTreeSet<String>,
) -> Result<Vec<Built>, DatasetError> {
    // First success per slot, in parallel.
    let first: Vec<Option<(u32, Built)>> = slots
        .par_iter()
        .map(|slot| (0..cfg.retries).find_map(|k| attempt(name, seed, slot, k, cfg, catalog).map(|b| (k, b))))
        .collect();
    // Deduplicate in slot order so the outcome does not depend on scheduling.
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(slots.len());
    for (slot, got) in slots.iter().zip(first) {
        let mut next = got;
        loop {
            match next {
                Some((_, b)) if seen.insert(b.hash.clone()) => {
                    out.push(b);
                    break;
                }
                Some((k, _)) => {
                    next = (k + 1..cfg.retries).find_map(|k| attempt(name, seed, slot, k, cfg, catalog).map(|b| (k, b)));
                }
                None => {
                    return Err(match &slot.subset {
                        Some(op) => DatasetError::CoverageUnreachable(op.clone()),
                        None => DatasetError::GenerationExhausted {
                            dataset: name.to_string(),
                            level: slot.level,
                            slot: slot.index,
                            attempts: cfg.retries,
                            produced: out.len(),
                        },
                    });
                }
            }
        }
    }
    Ok(out)
}

fn assemble(name: &str, seed: u64, quotas: Vec<Quota>, cfg: &DatasetConfig, built: Vec<Built>) -> Dataset {
    let entries = built
        .iter()
        .map(|b| {
            let (py, _) = b.program.file_names();
            Entry {
                program_id: b.program.manifest.program_id.clone(),
                level: b.program.manifest.level,
                structural_hash: b.hash.clone(),
                source_digest: b.program.source_digest(),
                manifest_digest: b.program.manifest_digest(),
                path: format!("{}/{py}", b.program.manifest.level),
            }
        })
        .collect();
    let manifest = DatasetManifest { name: name.to_string(), seed, quotas, config: *cfg, entries };
    Dataset { manifest, programs: built.into_iter().map(|b| b.program).collect() }
}

/// `ceil(scale * count)` programs of one curriculum stage.
pub fn build_stage(stage: u8, scale: f64, seed: u64, cfg: &DatasetConfig, catalog: &Catalog) -> Result<Dataset, DatasetError> {
    let spec = stage_spec(stage)?;
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(DatasetError::InvalidScale(scale));
    }
    let count = scaled(spec.count, scale);
    let name = format!("stage{stage}");
    let slots: Vec<Slot> = (0..count).map(|index| Slot { index, level: spec.level, mode: spec.mode, subset: None }).collect();
    let built = generate(&name, seed, &slots, cfg, catalog, &BTreeSet::new())?;
    let quotas = vec![Quota { level: spec.level, count, mode: spec.mode }];
    Ok(assemble(&name, seed, quotas, cfg, built))
}

/// `quota.count` programs at one level, written under the dataset `name`.
pub fn build_programs(name: &str, quota: Quota, seed: u64, cfg: &DatasetConfig, catalog: &Catalog) -> Result<Dataset, DatasetError> {
    let slots: Vec<Slot> = (0..quota.count).map(|index| Slot { index, level: quota.level, mode: quota.mode, subset: None }).collect();
    let built = generate(name, seed, &slots, cfg, catalog, &BTreeSet::new())?;
    Ok(assemble(name, seed, vec![quota], cfg, built))
}

/// Rounds up, ignoring floating-point noise just above an integer.
pub fn scaled(count: usize, scale: f64) -> usize {
    let x = count as f64 * scale;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// The held-out benchmark. Programs whose structural hash appears in
/// `exclude` (for example a training set's hashes) are regenerated.
pub fn build_benchmark(seed: u64, cfg: &DatasetConfig, catalog: &Catalog, exclude: &BTreeSet<String>) -> Result<Dataset, DatasetError> {
    let quotas = benchmark_spec(catalog);
    let mut slots = Vec::new();
    for q in &quotas {
        for i in 0..q.count {
            let subset = (q.level == 1).then(|| catalog.compute_ops[i / 2].name.clone());
            slots.push(Slot { index: i, level: q.level, mode: q.mode, subset });
        }
    }
    let built = generate("bench", seed, &slots, cfg, catalog, exclude)?;
    Ok(assemble("bench", seed, quotas, cfg, built))
}

impl Dataset {
    /// Writes the dataset under `root/<name>/` and returns that directory.
    pub fn write(&self, root: &Path) -> Result<PathBuf, DatasetError> {
        let dir = root.join(&self.manifest.name);
        for (p, e) in self.programs.iter().zip(&self.manifest.entries) {
            let src = dir.join(&e.path);
            fs::create_dir_all(src.parent().expect("entry path has a level directory"))?;
            fs::write(&src, &p.source)?;
            fs::write(src.with_extension("json"), p.manifest.to_json())?;
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("index.json"), self.manifest.to_json())?;
        Ok(dir)
    }
}

/// Reads a dataset directory and re-verifies every entry: digests, manifest
/// consistency, the shape oracle and the constraint checker.
pub fn load(dir: &Path, catalog: &Catalog) -> Result<Dataset, DatasetError> {
    let corrupt = |path: &Path, reason: String| DatasetError::Corrupt { path: path.to_path_buf(), reason };
    let index = dir.join("index.json");
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(&index)?).map_err(|e| corrupt(&index, e.to_string()))?;
    let mut programs = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let src_path = dir.join(&e.path);
        let json_path = src_path.with_extension("json");
        let source = fs::read_to_string(&src_path)?;
        let pm = parse_manifest(&fs::read_to_string(&json_path)?).map_err(|err| corrupt(&json_path, err.to_string()))?;
        let program = EmittedProgram { source, manifest: pm };
        if program.source_digest() != e.source_digest {
            return Err(corrupt(&src_path, "source digest differs from the index".into()));
        }
        if program.manifest_digest() != e.manifest_digest || solved_hash(&program.manifest) != e.structural_hash {
            return Err(corrupt(&json_path, "manifest digest differs from the index".into()));
        }
        verify_manifest(&program.manifest, catalog).map_err(|r| corrupt(&json_path, r))?;
        programs.push(program);
    }
    Ok(Dataset { manifest, programs })
}

/// Runs the shape oracle and the constraint checker over a program manifest.
pub fn verify_manifest(m: &Manifest, catalog: &Catalog) -> Result<(), String> {
    let problems = manifest_violations(m, catalog);
    match problems.first() {
        Some(p) => Err(format!("{} problem(s), first: {p}", problems.len())),
        None => Ok(()),
    }
}

/// Every problem the graph validator, the shape oracle and the constraint
/// checker find in a manifest; empty when it is sound.
pub fn manifest_violations(m: &Manifest, catalog: &Catalog) -> Vec<String> {
    if let Err(e) = m.graph.validate(catalog) {
        return vec![format!("graph: {e}")];
    }
    let solution = m.solution();
    let mut out = Vec::new();
    let report = verify_program(&m.graph, &solution);
    match &report.inference {
        ReportStatus::Ok => {}
        ReportStatus::MissingInput { edge } => out.push(format!("oracle: edge {edge} is read but never defined")),
        ReportStatus::ShapeError { node, reason } => out.push(format!("oracle: node {node}: {reason}")),
    }
    for m in &report.mismatches {
        let claimed = m.claimed.as_ref().map_or("nothing".to_string(), |s| s.to_string());
        out.push(format!("oracle: edge {} claims {claimed} but infers to {}", m.edge, m.inferred));
    }
    match emit_constraints(&m.graph, catalog, m.limits).map_err(|e| e.to_string()).and_then(|cs| check(&solution, &cs).map_err(|e| e.to_string())) {
        Ok(v) => out.extend(v.iter().map(|v| format!("constraint: {v}"))),
        Err(e) => out.push(format!("constraint: {e}")),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_sizes() {
        assert_eq!(scaled(20_000, 0.01), 200);
        assert_eq!(scaled(60_000, 0.01), 600);
        assert_eq!(scaled(20_000, 0.001), 20);
        assert_eq!(scaled(3, 0.5), 2);
        assert!(matches!(stage_spec(4), Err(DatasetError::UnknownStage(4))));
        let total: usize = benchmark_spec(Catalog::standard()).iter().map(|q| q.count).sum();
        assert_eq!(total, 2 * 61 + 300);
    }

    #[test]
    fn small_stage_is_deterministic_and_reloads() {
        let cfg = DatasetConfig::default();
        let a = build_stage(3, 0.0005, 9, &cfg, Catalog::standard()).unwrap();
        let b = build_stage(3, 0.0005, 9, &cfg, Catalog::standard()).unwrap();
        assert_eq!(a.manifest.entries.len(), 10);
        assert_eq!(a.manifest.digest(), b.manifest.digest());
        let tmp = tempfile::tempdir().unwrap();
        let dir = a.write(tmp.path()).unwrap();
        let back = load(&dir, Catalog::standard()).unwrap();
        assert_eq!(back.manifest, a.manifest);
    }
}
