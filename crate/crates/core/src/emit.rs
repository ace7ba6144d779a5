//! Renders a solved graph as functional source text plus a JSON manifest.
//!
//! The source defines `get_inputs`, which builds every create-statement tensor
//! from its solved shape, and `fused_operator`, whose body holds one
//! assignment per compute node and returns every unconsumed edge.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attrs::Attrs;
use crate::catalog::{Catalog, CatalogError, ConstraintKind};
use crate::graph::ProgramGraph;
use crate::oracle::verify_program;
use crate::shape::{EdgeId, NodeId, Shape};
use crate::solver::{GlobalLimits, ShapeSolution};

/// Name of the function whose body holds the operator statements.
pub const ENTRY: &str = "fused_operator";
/// Name of the function that builds the input tensors.
pub const INPUTS_FN: &str = "get_inputs";

#[derive(Debug, Error, PartialEq)]
pub enum EmitError {
    #[error("solution does not match the graph: {0}")]
    UnverifiedSolution(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Error, PartialEq)]
#[error("malformed manifest: {0}")]
pub struct MalformedManifest(pub String);

/// Where a program came from; recorded verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Origin {
    pub program_id: String,
    pub seed: u64,
    #[serde(default)]
    pub limits: GlobalLimits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub program_id: String,
    pub level: u32,
    pub seed: u64,
    /// Operator names in statement order.
    pub ops: Vec<String>,
    /// Create-statement edges, in the order `get_inputs` returns them.
    pub inputs: Vec<EdgeId>,
    pub outputs: Vec<EdgeId>,
    pub shapes: BTreeMap<EdgeId, Shape>,
    pub total_flops: u64,
    pub total_numel: u64,
    pub limits: GlobalLimits,
    /// The graph with every node's attributes fully resolved.
    pub graph: ProgramGraph,
}

impl Manifest {
    /// The solution this manifest records.
    pub fn solution(&self) -> ShapeSolution {
        ShapeSolution {
            shapes: self.shapes.clone(),
            attrs: self.graph.nodes.iter().map(|n| (n.node_id, n.attrs.clone())).collect(),
            total_flops: self.total_flops,
            total_numel: self.total_numel,
        }
    }

    /// Checks the fields that are redundant with the embedded graph.
    pub fn consistency(&self) -> Result<(), MalformedManifest> {
        let bad = |m: &str| Err(MalformedManifest(m.to_string()));
        if self.level as usize != self.graph.nodes.len() {
            return bad("level differs from the node count");
        }
        if self.ops.iter().ne(self.graph.nodes.iter().map(|n| &n.op)) {
            return bad("op list differs from the graph");
        }
        if self.inputs != self.graph.create_edges() {
            return bad("inputs differ from the create statements");
        }
        if self.outputs != self.graph.outputs {
            return bad("outputs differ from the graph");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedProgram {
    pub source: String,
    pub manifest: Manifest,
}

impl EmittedProgram {
    pub fn source_digest(&self) -> String {
        sha256_hex(self.source.as_bytes())
    }

    pub fn manifest_digest(&self) -> String {
        sha256_hex(self.manifest.to_json().as_bytes())
    }

    /// File names used when the program is written to disk.
    pub fn file_names(&self) -> (String, String) {
        let id = &self.manifest.program_id;
        (format!("program_{id}.py"), format!("program_{id}.json"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Emits with an id derived from the graph's canonical encoding and seed 0.
pub fn emit(graph: &ProgramGraph, solution: &ShapeSolution, catalog: &Catalog) -> Result<EmittedProgram, EmitError> {
    let id = sha256_hex(graph.canonical_encoding().as_bytes())[..16].to_string();
    emit_with(graph, solution, catalog, &Origin { program_id: id, ..Origin::default() })
}

pub fn emit_with(graph: &ProgramGraph, solution: &ShapeSolution, catalog: &Catalog, origin: &Origin) -> Result<EmittedProgram, EmitError> {
    let report = verify_program(graph, solution);
    if !report.is_ok() {
        let reason = match report.mismatches.first() {
            Some(m) => format!("{} claimed {:?}, inferred {}", m.edge, m.claimed, m.inferred),
            None => format!("{:?}", report.inference),
        };
        return Err(EmitError::UnverifiedSolution(reason));
    }
    let mut resolved = graph.clone();
    for node in &mut resolved.nodes {
        if let Some(a) = solution.attrs.get(&node.node_id) {
            node.attrs = a.clone();
        }
    }

    let integer: BTreeSet<EdgeId> = graph.edges().iter().filter(|t| t.integer_typed).map(|t| t.edge_id).collect();
    let inputs = graph.create_edges();
    let mut src = String::from("import torch\n\n");
    src.push_str(&format!("def {INPUTS_FN}():\n"));
    for c in &graph.create_statements {
        let spec = catalog.lookup(&c.op)?;
        let shape = &solution.shapes[&c.output.edge_id];
        let _ = writeln!(src, "    {} = {}({})", c.output.edge_id, spec.qualified_name, list(shape.dims()));
    }
    let _ = writeln!(src, "    return [{}]\n", names(&inputs));
    let _ = writeln!(src, "def {ENTRY}({}):", names(&inputs));
    for node in &resolved.nodes {
        let spec = catalog.lookup(&node.op)?;
        let args: Vec<String> = node
            .inputs
            .iter()
            .map(|e| if integer.contains(e) { format!("{e}.float()") } else { e.to_string() })
            .collect();
        let rank = solution.shapes[&node.inputs[0]].order();
        let call = call(&spec.qualified_name, spec.constraint_kind, &node.op, &args, &node.attrs, rank)
            .map_err(|m| EmitError::UnverifiedSolution(format!("{}: {m}", node.node_id)))?;
        let _ = writeln!(src, "    {} = {call}", node.output.edge_id);
    }
    let _ = writeln!(src, "    return [{}]", names(&graph.outputs));

    let manifest = Manifest {
        program_id: origin.program_id.clone(),
        level: graph.level(),
        seed: origin.seed,
        ops: graph.nodes.iter().map(|n| n.op.clone()).collect(),
        inputs,
        outputs: graph.outputs.clone(),
        shapes: solution.shapes.clone(),
        total_flops: solution.total_flops,
        total_numel: solution.total_numel,
        limits: origin.limits,
        graph: resolved,
    };
    Ok(EmittedProgram { source: src, manifest })
}

pub fn parse_manifest(text: &str) -> Result<Manifest, MalformedManifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| MalformedManifest(e.to_string()))?;
    m.consistency()?;
    Ok(m)
}

fn names(edges: &[EdgeId]) -> String {
    edges.iter().map(EdgeId::to_string).collect::<Vec<_>>().join(", ")
}

fn list(dims: &[u32]) -> String {
    format!("[{}]", dims.iter().map(u32::to_string).collect::<Vec<_>>().join(", "))
}

/// Python tuple with `v` repeated `m` times.
fn tuple(v: u32, m: usize) -> String {
    if m == 1 {
        format!("({v},)")
    } else {
        format!("({})", vec![v.to_string(); m].join(", "))
    }
}

fn py_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Renders one operator call. `rank` is the order of the first input.
fn call(qn: &str, kind: Option<ConstraintKind>, op: &str, args: &[String], a: &Attrs, rank: usize) -> Result<String, String> {
    let x = &args[0];
    let dim = || a.dim.ok_or("missing dim");
    Ok(match kind.ok_or("not a compute operator")? {
        ConstraintKind::Broadcast | ConstraintKind::Matmul | ConstraintKind::Bmm | ConstraintKind::Triangular => {
            format!("{qn}({})", args.join(", "))
        }
        ConstraintKind::Unary => match op {
            "Clamp" => {
                let mut s = format!("{qn}({x}");
                if let Some(lo) = a.clamp_min {
                    let _ = write!(s, ", min={lo:?}");
                }
                if let Some(hi) = a.clamp_max {
                    let _ = write!(s, ", max={hi:?}");
                }
                s + ")"
            }
            _ => format!("{qn}({x})"),
        },
        ConstraintKind::Reduce => {
            let keep = a.keepdim.unwrap_or(false);
            // Max/Min with a dim return (values, indices).
            let values = if matches!(op, "Max" | "Min") { ".values" } else { "" };
            match a.dim {
                Some(d) => format!("{qn}({x}, dim={d}, keepdim={}){values}", py_bool(keep)),
                None if keep => format!("{qn}({x}).reshape({})", list(&vec![1; rank])),
                None => format!("{qn}({x})"),
            }
        }
        ConstraintKind::AlongDim => {
            let values = if matches!(op, "CumMax" | "CumMin") { ".values" } else { "" };
            format!("{qn}({x}, dim={}){values}", dim()?)
        }
        ConstraintKind::Transpose => format!("{qn}({x}, -2, -1)"),
        ConstraintKind::BatchNorm => format!("{qn}({x}, None, None, training=True)"),
        ConstraintKind::InstanceNorm => format!("{qn}({x})"),
        ConstraintKind::LayerNorm => format!("{qn}({x}, normalized_shape=[{x}.shape[-1]])"),
        ConstraintKind::GroupNorm => format!("{qn}({x}, num_groups={})", a.groups.ok_or("missing num_groups")?),
        ConstraintKind::Pool { spatial } => {
            let ks = a.kernel_size.as_ref().ok_or("missing kernel_size")?;
            let k = if ks.iter().all(|&k| k == ks[0]) {
                ks[0].to_string()
            } else {
                format!("({})", ks.iter().map(u32::to_string).collect::<Vec<_>>().join(", "))
            };
            debug_assert_eq!(ks.len(), spatial as usize);
            format!("{qn}({x}, kernel_size={k}, stride={}, padding={})", a.stride.unwrap_or(1), a.padding.unwrap_or(0))
        }
        ConstraintKind::Conv { spatial } => {
            let m = spatial as usize;
            let (s, p, d, g) = conv_attrs(a);
            format!("{qn}({x}, {}, None, {}, {}, {}, {g})", args[1], tuple(s, m), tuple(p, m), tuple(d, m))
        }
        ConstraintKind::ConvTranspose { spatial } => {
            let m = spatial as usize;
            let (s, p, d, g) = conv_attrs(a);
            // Argument order: stride, padding, output_padding, groups, dilation.
            format!("{qn}({x}, {}, None, {}, {}, {}, {g}, {})", args[1], tuple(s, m), tuple(p, m), tuple(0, m), tuple(d, m))
        }
        ConstraintKind::Cat => format!("{qn}([{}], dim={})", args.join(", "), dim()?),
        ConstraintKind::Stack => format!("{qn}([{}], dim=0)", args.join(", ")),
    })
}

fn conv_attrs(a: &Attrs) -> (u32, u32, u32, u32) {
    (a.stride.unwrap_or(1), a.padding.unwrap_or(0), a.dilation.unwrap_or(1), a.groups.unwrap_or(1))
}

/// Per-statement def/use view of an emitted program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub node: NodeId,
    pub inputs: Vec<EdgeId>,
    pub output: EdgeId,
}

impl Manifest {
    pub fn statements(&self) -> Vec<Statement> {
        self.graph
            .nodes
            .iter()
            .map(|n| Statement { node: n.node_id, inputs: n.inputs.clone(), output: n.output.edge_id })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build, BuildConfig, BuildMode};
    use crate::solver::{solve_graph, SolverConfig};

    fn solved(level: u32, seed: u64, ops: Option<&[&str]>) -> (ProgramGraph, ShapeSolution) {
        let mut cfg = BuildConfig::new(level, BuildMode::Dag, seed).with_order_filter(true);
        if let Some(ops) = ops {
            cfg = cfg.with_subset(ops.iter().copied());
        }
        let g = build(&cfg, Catalog::standard()).unwrap();
        let s = solve_graph(&g, Catalog::standard(), &SolverConfig::with_seed(seed)).unwrap();
        (g, s)
    }

    #[test]
    fn add_program_text() {
        let (g, mut s) = solved(1, 3, Some(&["Add"]));
        for e in [EdgeId(0), EdgeId(1), EdgeId(2)] {
            s.shapes.insert(e, Shape::from([128]));
        }
        let p = emit(&g, &s, Catalog::standard()).unwrap();
        let (a, b) = (g.nodes[0].inputs[0], g.nodes[0].inputs[1]);
        let c = |i: usize| Catalog::standard().lookup(&g.create_statements[i].op).unwrap().qualified_name.clone();
        let expected = format!(
            "import torch\n\ndef get_inputs():\n    tensor_0 = {}([128])\n    tensor_1 = {}([128])\n    \
             return [tensor_0, tensor_1]\n\ndef fused_operator(tensor_0, tensor_1):\n    tensor_2 = torch.add({a}, {b})\n    \
             return [tensor_2]\n",
            c(0),
            c(1)
        );
        assert_eq!(p.source, expected);
    }

    #[test]
    fn conv_arguments_are_positional_tuples() {
        let a = Attrs { stride: Some(1), padding: Some(0), dilation: Some(1), groups: Some(1), ..Attrs::default() };
        let args = vec!["tensor_31".to_string(), "tensor_11".to_string()];
        let s = call("torch.nn.functional.conv2d", Some(ConstraintKind::Conv { spatial: 2 }), "Conv2d", &args, &a, 4).unwrap();
        assert_eq!(s, "torch.nn.functional.conv2d(tensor_31, tensor_11, None, (1, 1), (0, 0), (1, 1), 1)");
        let p = Attrs { kernel_size: Some(vec![2, 2]), stride: Some(2), padding: Some(0), ..Attrs::default() };
        let s = call("torch.nn.functional.max_pool2d", Some(ConstraintKind::Pool { spatial: 2 }), "MaxPool2d", &args[..1], &p, 4).unwrap();
        assert_eq!(s, "torch.nn.functional.max_pool2d(tensor_31, kernel_size=2, stride=2, padding=0)");
    }

    #[test]
    fn emission_is_deterministic_and_round_trips() {
        for seed in 0..20 {
            let (g, s) = solved(5, seed, None);
            let a = emit(&g, &s, Catalog::standard()).unwrap();
            let b = emit(&g, &s, Catalog::standard()).unwrap();
            assert_eq!(a.source, b.source);
            let back = parse_manifest(&a.manifest.to_json()).unwrap();
            assert_eq!(back, a.manifest);
            assert_eq!(back.level, 5);
            assert!(verify_program(&back.graph, &back.solution()).is_ok());
        }
    }

    #[test]
    fn truncated_manifest_is_rejected() {
        let (g, s) = solved(2, 1, None);
        let json = emit(&g, &s, Catalog::standard()).unwrap().manifest.to_json();
        assert!(parse_manifest(&json[..json.len() / 2]).is_err());
    }

    #[test]
    fn wrong_shape_is_unverified() {
        let (g, mut s) = solved(2, 4, None);
        let last = g.nodes.last().unwrap().output.edge_id;
        s.shapes.get_mut(&last).unwrap().0.push(7);
        assert!(matches!(emit(&g, &s, Catalog::standard()), Err(EmitError::UnverifiedSolution(_))));
    }
}
