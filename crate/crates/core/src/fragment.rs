//! Fragment enumeration, hybrid-source reconstruction and candidate selection.
//!
//! A fragment is a run of consecutive statements in an emitted program's
//! operator body. Search replaces one fragment at a time with a generated
//! function, keeps the replacements a verifier accepts, times the resulting
//! hybrids and picks the fastest. Generation, verification and timing are
//! injected through [`Generator`], [`Verifier`] and [`Bench`].

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emit::{EmittedProgram, ENTRY};
use crate::shape::EdgeId;

pub const DEFAULT_MAX_LEN: usize = 5;
pub const DEFAULT_CAP: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum FragmentError {
    #[error("fragment at {start} of length {len} does not fit a program of {n} statements")]
    FragmentOutOfRange { start: usize, len: usize, n: usize },
    #[error("replacement binds {found} input(s) but the fragment has {expected}")]
    BindingMismatch { expected: usize, found: usize },
    #[error("replacement does not define `{0}`")]
    MissingEntry(String),
    #[error("program source has no `{ENTRY}` body")]
    MalformedSource,
}

#[derive(Debug, Error, PartialEq)]
#[error("no candidate passed verification")]
pub struct NoneVerified;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fragment {
    pub start: usize,
    pub len: usize,
}

/// Contiguous fragments of `n` statements, ordered by length and then start,
/// truncated to `cap`.
pub fn extract(n: usize, max_len: usize, cap: usize) -> Vec<Fragment> {
    let mut plan = Vec::new();
    for len in 1..=max_len.min(n) {
        for start in 0..=n - len {
            if plan.len() == cap {
                return plan;
            }
            plan.push(Fragment { start, len });
        }
    }
    plan
}

/// Closed form for `extract(n, max_len, cap).len()`.
pub fn plan_size(n: usize, max_len: usize, cap: usize) -> usize {
    let l = max_len.min(n);
    // Sum over len = 1..=l of (n - len + 1).
    let total = l * (n + 1) - l * (l + 1) / 2;
    total.min(cap)
}

/// Tensors a fragment reads from outside and the tensors it must hand back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundary {
    /// Read by the fragment but defined before it, ascending.
    pub inputs: Vec<EdgeId>,
    /// Defined by the fragment and read after it or returned, ascending.
    pub outputs: Vec<EdgeId>,
}

pub fn boundary(program: &EmittedProgram, fragment: Fragment) -> Result<Boundary, FragmentError> {
    let stmts = program.manifest.statements();
    let n = stmts.len();
    if fragment.len == 0 || fragment.start + fragment.len > n {
        return Err(FragmentError::FragmentOutOfRange { start: fragment.start, len: fragment.len, n });
    }
    let range = fragment.start..fragment.start + fragment.len;
    let defined: BTreeSet<EdgeId> = stmts[range.clone()].iter().map(|s| s.output).collect();
    let inputs: BTreeSet<EdgeId> = stmts[range.clone()]
        .iter()
        .flat_map(|s| s.inputs.iter().copied())
        .filter(|e| !defined.contains(e))
        .collect();
    let later: BTreeSet<EdgeId> = stmts[range.end..]
        .iter()
        .flat_map(|s| s.inputs.iter().copied())
        .chain(program.manifest.outputs.iter().copied())
        .collect();
    let outputs = defined.intersection(&later).copied().collect();
    Ok(Boundary { inputs: inputs.into_iter().collect(), outputs })
}

/// Lines of the operator body (statements and the final return) and the
/// index of its first line within `lines`.
fn body(source: &str) -> Result<(Vec<&str>, usize), FragmentError> {
    let lines: Vec<&str> = source.lines().collect();
    let header = format!("def {ENTRY}(");
    let at = lines.iter().position(|l| l.starts_with(&header)).ok_or(FragmentError::MalformedSource)?;
    Ok((lines, at + 1))
}

/// The fragment's own statements wrapped in a function named `entry`, taking
/// the boundary inputs and returning the boundary outputs.
pub fn extract_source(program: &EmittedProgram, fragment: Fragment, entry: &str) -> Result<String, FragmentError> {
    let b = boundary(program, fragment)?;
    let (lines, first) = body(&program.source)?;
    let mut out = format!("def {entry}({}):\n", join(&b.inputs));
    for line in &lines[first + fragment.start..first + fragment.start + fragment.len] {
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&format!("    return [{}]\n", join(&b.outputs)));
    Ok(out)
}

/// Replaces the fragment's statements with one call to `entry`, defined by
/// `replacement`. Every other line is kept verbatim.
pub fn reconstruct(program: &EmittedProgram, fragment: Fragment, replacement: &str, entry: &str) -> Result<String, FragmentError> {
    let b = boundary(program, fragment)?;
    let params = entry_params(replacement, entry).ok_or_else(|| FragmentError::MissingEntry(entry.to_string()))?;
    if params != b.inputs.len() {
        return Err(FragmentError::BindingMismatch { expected: b.inputs.len(), found: params });
    }
    let (lines, first) = body(&program.source)?;
    let header = first - 1;
    let mut out = String::new();
    for line in &lines[..header] {
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(replacement.trim_end());
    out.push_str("\n\n");
    out.push_str(lines[header]);
    out.push('\n');
    let (s, e) = (first + fragment.start, first + fragment.start + fragment.len);
    for line in &lines[first..s] {
        out.push_str(line);
        out.push('\n');
    }
    // A trailing comma unpacks a single-element result.
    let targets = match b.outputs.len() {
        0 => "_".to_string(),
        1 => format!("{},", b.outputs[0]),
        _ => join(&b.outputs),
    };
    out.push_str(&format!("    {targets} = {entry}({})\n", join(&b.inputs)));
    for line in &lines[e..] {
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

fn join(edges: &[EdgeId]) -> String {
    edges.iter().map(EdgeId::to_string).collect::<Vec<_>>().join(", ")
}

/// Parameter count of `def entry(...)` in `source`.
fn entry_params(source: &str, entry: &str) -> Option<usize> {
    let header = format!("def {entry}(");
    let line = source.lines().find(|l| l.trim_start().starts_with(&header))?;
    let rest = &line.trim_start()[header.len()..];
    let params = &rest[..rest.find(')')?];
    Some(params.split(',').filter(|p| !p.trim().is_empty()).count())
}

/// One assignment in the minimal statement grammar: `targets = callee(args)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedStatement {
    pub defs: Vec<String>,
    pub uses: Vec<String>,
}

/// Parses the operator body of `source`. Each line before the final return
/// must assign a call whose tensor arguments were bound earlier (as
/// parameters or by earlier statements). Returns the statements and the
/// names returned.
pub fn parse_body(source: &str) -> Result<(Vec<ParsedStatement>, Vec<String>), String> {
    let (lines, first) = body(source).map_err(|e| e.to_string())?;
    let header = lines[first - 1];
    let params = &header[header.find('(').ok_or("bad header")? + 1..header.rfind(')').ok_or("bad header")?];
    let mut bound: BTreeSet<String> = tensor_names(params).into_iter().collect();
    let mut stmts = Vec::new();
    for line in &lines[first..] {
        let t = line.trim();
        if t.is_empty() {
            break;
        }
        if let Some(ret) = t.strip_prefix("return ") {
            let names = tensor_names(ret);
            if let Some(u) = names.iter().find(|u| !bound.contains(*u)) {
                return Err(format!("return reads unbound {u}"));
            }
            return Ok((stmts, names));
        }
        let (lhs, rhs) = t.split_once(" = ").ok_or_else(|| format!("not an assignment: {t}"))?;
        if !rhs.contains('(') {
            return Err(format!("not a call: {t}"));
        }
        let defs = tensor_names(lhs);
        if defs.is_empty() {
            return Err(format!("assignment binds no tensor: {t}"));
        }
        let uses = tensor_names(rhs);
        if let Some(u) = uses.iter().find(|u| !bound.contains(*u)) {
            return Err(format!("{u} is used before it is bound: {t}"));
        }
        bound.extend(defs.iter().cloned());
        stmts.push(ParsedStatement { defs, uses });
    }
    Err("operator body has no return".into())
}

fn tensor_names(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while let Some(off) = text[i..].find("tensor_") {
        let start = i + off;
        let mut end = start + "tensor_".len();
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        let boundary_before = start == 0 || !(bytes[start - 1].is_ascii_alphanumeric() || bytes[start - 1] == b'_');
        if boundary_before && end > start + "tensor_".len() {
            out.push(text[start..end].to_string());
        }
        i = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub fragment: Fragment,
    pub replacement_source: String,
    pub verified: bool,
    /// Seconds; present only for verified candidates.
    pub measured_time: Option<f64>,
}

/// Fastest verified candidate; equal times go to the smaller start, then the
/// shorter fragment.
pub fn select_best(candidates: &[Candidate]) -> Result<Candidate, NoneVerified> {
    candidates
        .iter()
        .filter_map(|c| match (c.verified, c.measured_time) {
            (true, Some(t)) => Some((t, c)),
            _ => None,
        })
        .min_by(|(ta, a), (tb, b)| {
            ta.total_cmp(tb)
                .then(a.fragment.start.cmp(&b.fragment.start))
                .then(a.fragment.len.cmp(&b.fragment.len))
        })
        .map(|(_, c)| c.clone())
        .ok_or(NoneVerified)
}

/// Produces replacement source for a fragment, or nothing.
pub trait Generator: Sync {
    fn generate(&self, program: &EmittedProgram, fragment: Fragment, entry: &str) -> Option<String>;
}

/// Decides whether a replacement is correct.
pub trait Verifier: Sync {
    fn verify(&self, program: &EmittedProgram, fragment: Fragment, replacement: &str) -> bool;
}

/// Measures the running time of a hybrid program in seconds.
pub trait Bench: Sync {
    fn time(&self, source: &str) -> f64;
}

/// Returns the fragment's own statements as a function.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl Generator for PassThrough {
    fn generate(&self, program: &EmittedProgram, fragment: Fragment, entry: &str) -> Option<String> {
        extract_source(program, fragment, entry).ok()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysVerified;

impl Verifier for AlwaysVerified {
    fn verify(&self, _: &EmittedProgram, _: Fragment, _: &str) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NeverVerified;

impl Verifier for NeverVerified {
    fn verify(&self, _: &EmittedProgram, _: Fragment, _: &str) -> bool {
        false
    }
}

/// Cost equal to the number of statements left in the operator body.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatementCount;

impl Bench for StatementCount {
    fn time(&self, source: &str) -> f64 {
        parse_body(source).map(|(s, _)| s.len() as f64).unwrap_or(f64::INFINITY)
    }
}

/// Name given to generated replacement functions.
pub const REPLACEMENT_ENTRY: &str = "_fused_fragment";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub plan_size: usize,
    pub generator_calls: usize,
    /// Every candidate, in plan order.
    pub log: Vec<Candidate>,
    pub best: Option<Candidate>,
    /// Hybrid source for `best`.
    pub hybrid: Option<String>,
}

impl SearchResult {
    pub fn verified_count(&self) -> usize {
        self.log.iter().filter(|c| c.verified).count()
    }
}

pub fn run_search(program: &EmittedProgram, generator: &dyn Generator, verifier: &dyn Verifier, bench: &dyn Bench) -> SearchResult {
    run_search_with(program, generator, verifier, bench, DEFAULT_MAX_LEN, DEFAULT_CAP)
}

pub fn run_search_with(
    program: &EmittedProgram,
    generator: &dyn Generator,
    verifier: &dyn Verifier,
    bench: &dyn Bench,
    max_len: usize,
    cap: usize,
) -> SearchResult {
    let plan = extract(program.manifest.level as usize, max_len, cap);
    let calls = AtomicUsize::new(0);
    let results: Vec<(Candidate, Option<String>)> = plan
        .par_iter()
        .map(|&fragment| {
            calls.fetch_add(1, Ordering::Relaxed);
            let Some(src) = generator.generate(program, fragment, REPLACEMENT_ENTRY) else {
                return (Candidate { fragment, replacement_source: String::new(), verified: false, measured_time: None }, None);
            };
            let hybrid = if verifier.verify(program, fragment, &src) {
                reconstruct(program, fragment, &src, REPLACEMENT_ENTRY).ok()
            } else {
                None
            };
            let measured_time = hybrid.as_deref().map(|h| bench.time(h));
            let verified = hybrid.is_some();
            (Candidate { fragment, replacement_source: src, verified, measured_time }, hybrid)
        })
        .collect();
    let log: Vec<Candidate> = results.iter().map(|(c, _)| c.clone()).collect();
    let best = select_best(&log).ok();
    let hybrid = best
        .as_ref()
        .and_then(|b| results.iter().find(|(c, _)| c.fragment == b.fragment).and_then(|(_, h)| h.clone()));
    SearchResult { plan_size: plan.len(), generator_calls: calls.into_inner(), log, best, hybrid }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_plans() {
        assert_eq!(extract(1, 5, 1024), vec![Fragment { start: 0, len: 1 }]);
        assert_eq!(extract(5, 5, 1024).len(), 15);
        let big = extract(300, 5, 1024);
        assert_eq!(big.len(), 1024);
        assert_eq!(big.iter().filter(|f| f.len == 4).count(), 1024 - 897);
        assert_eq!(big.last(), Some(&Fragment { start: 126, len: 4 }));
    }

    #[test]
    fn tie_break_prefers_smaller_start() {
        let c = |start, t| Candidate {
            fragment: Fragment { start, len: 2 },
            replacement_source: String::new(),
            verified: true,
            measured_time: Some(t),
        };
        assert_eq!(select_best(&[c(3, 0.8), c(1, 0.8)]).unwrap().fragment.start, 1);
        assert_eq!(select_best(&[c(0, 0.9), c(1, 1.1), c(2, 0.7)]).unwrap().fragment.start, 2);
        assert_eq!(select_best(&[]), Err(NoneVerified));
    }

    #[test]
    fn names_are_found_at_word_boundaries() {
        assert_eq!(tensor_names("f(tensor_1, xtensor_2, tensor_30.float())"), vec!["tensor_1", "tensor_30"]);
    }
}
