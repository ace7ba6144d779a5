//! Program graphs and the random graph builder.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attrs::{domains, Attrs};
use crate::catalog::{Arity, Catalog, CatalogError, OperatorSpec};
use crate::shape::{EdgeId, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("level must be at least 1")]
    InvalidLevel,
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("operator subset cannot produce a chain: {0}")]
    AritySubsetConflict(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("{0}")]
    Invalid(String),
    #[error("malformed graph document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    /// Index into `create_statements`.
    Create(u32),
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorRef {
    pub edge_id: EdgeId,
    pub producer: Producer,
    #[serde(default)]
    pub integer_typed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateStatement {
    pub op: String,
    pub output: TensorRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: NodeId,
    pub op: String,
    pub inputs: Vec<EdgeId>,
    pub output: TensorRef,
    #[serde(default, skip_serializing_if = "Attrs::is_empty")]
    pub attrs: Attrs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramGraph {
    pub create_statements: Vec<CreateStatement>,
    pub nodes: Vec<Node>,
    pub outputs: Vec<EdgeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    #[default]
    Dag,
    Chain,
}

impl std::str::FromStr for BuildMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dag" => Ok(BuildMode::Dag),
            "chain" => Ok(BuildMode::Chain),
            other => Err(format!("unknown mode `{other}` (expected dag or chain)")),
        }
    }
}

impl std::fmt::Display for BuildMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BuildMode::Dag => "dag",
            BuildMode::Chain => "chain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub level: u32,
    pub mode: BuildMode,
    #[serde(default)]
    pub op_subset: Option<Vec<String>>,
    pub seed: u64,
    /// Redraw a node (operator and inputs) when it leaves the graph without
    /// any consistent assignment of tensor orders.
    #[serde(default)]
    pub order_filter: bool,
}

/// Redraws allowed per node before the builder keeps an inconsistent draw.
const NODE_REDRAWS: usize = 64;

impl BuildConfig {
    pub fn new(level: u32, mode: BuildMode, seed: u64) -> Self {
        BuildConfig { level, mode, op_subset: None, seed, order_filter: false }
    }

    pub fn with_order_filter(mut self, on: bool) -> Self {
        self.order_filter = on;
        self
    }

    pub fn with_subset<S: Into<String>>(mut self, ops: impl IntoIterator<Item = S>) -> Self {
        self.op_subset = Some(ops.into_iter().map(Into::into).collect());
        self
    }
}

/// Builds a graph using a generator seeded from `config.seed`.
pub fn build(config: &BuildConfig, catalog: &Catalog) -> Result<ProgramGraph, BuildError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    build_with_rng(config, catalog, &mut rng)
}

/// Builds a graph drawing all randomness from `rng`.
pub fn build_with_rng<R: Rng + ?Sized>(
    config: &BuildConfig,
    catalog: &Catalog,
    rng: &mut R,
) -> Result<ProgramGraph, BuildError> {
    if config.level == 0 {
        return Err(BuildError::InvalidLevel);
    }
    let subset = config.op_subset.as_deref();
    let mut b = Builder { catalog, creates: Vec::new(), nodes: Vec::new(), next_edge: 0, candidates: Vec::new() };
    let mut previous: Option<EdgeId> = None;

    for _ in 0..config.level {
        let mut attempt = 0;
        let out = loop {
            let mark = b.mark();
            let out = b.draw_node(rng, config, subset, previous)?;
            attempt += 1;
            if !config.order_filter || attempt > NODE_REDRAWS || b.orders_consistent() {
                break out;
            }
            b.rollback(mark);
        };
        previous = Some(out);
    }
    Ok(b.finish())
}

struct Builder<'c> {
    catalog: &'c Catalog,
    creates: Vec<CreateStatement>,
    nodes: Vec<Node>,
    next_edge: u32,
    candidates: Vec<EdgeId>,
}

#[derive(Clone, Copy)]
struct Mark {
    creates: usize,
    nodes: usize,
    next_edge: u32,
    candidates: usize,
}

impl Builder<'_> {
    fn draw_node<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        config: &BuildConfig,
        subset: Option<&[String]>,
        previous: Option<EdgeId>,
    ) -> Result<EdgeId, BuildError> {
        let catalog = self.catalog;
        let spec = catalog.sample_compute(rng, subset)?;
        let m = match spec.arity {
            Arity::Fixed(k) => k as usize,
            Arity::AtLeast(_) => rng.random_range(2..=4u32) as usize,
        };
        if m == 0 {
            return Err(BuildError::AritySubsetConflict(spec.name.clone()));
        }
        let inputs = match (config.mode, previous) {
            (BuildMode::Chain, Some(prev)) => {
                let mut inputs = vec![prev];
                inputs.extend(self.draw(rng, m - 1, Some(prev))?);
                inputs
            }
            _ => self.draw(rng, m, None)?,
        };
        Ok(self.push_node(rng, spec, inputs))
    }

    fn mark(&self) -> Mark {
        Mark { creates: self.creates.len(), nodes: self.nodes.len(), next_edge: self.next_edge, candidates: self.candidates.len() }
    }

    fn rollback(&mut self, mark: Mark) {
        self.creates.truncate(mark.creates);
        self.nodes.truncate(mark.nodes);
        self.next_edge = mark.next_edge;
        self.candidates.truncate(mark.candidates);
    }

    fn orders_consistent(&self) -> bool {
        let partial =
            ProgramGraph { create_statements: self.creates.clone(), nodes: self.nodes.clone(), outputs: Vec::new() };
        match crate::solver::emit_constraints(&partial, self.catalog, Default::default()) {
            Ok(cs) => crate::solver::orders_consistent(&cs),
            Err(_) => false,
        }
    }

    fn fresh_edge(&mut self) -> EdgeId {
        let id = EdgeId(self.next_edge);
        self.next_edge += 1;
        id
    }

    /// Draws `m` distinct candidates, excluding `skip`, topping the list up with
    /// created tensors when too few are available.
    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R, m: usize, skip: Option<EdgeId>) -> Result<Vec<EdgeId>, BuildError> {
        let available = |c: &Vec<EdgeId>| c.iter().filter(|&&e| Some(e) != skip).count();
        while available(&self.candidates) < m {
            let op = self.catalog.sample_create(rng, None)?;
            let edge = self.fresh_edge();
            let idx = self.creates.len() as u32;
            self.creates.push(CreateStatement {
                op: op.name.clone(),
                output: TensorRef { edge_id: edge, producer: Producer::Create(idx), integer_typed: false },
            });
            self.candidates.push(edge);
        }
        let pool: Vec<EdgeId> = self.candidates.iter().copied().filter(|&e| Some(e) != skip).collect();
        Ok(index::sample(rng, pool.len(), m).into_iter().map(|i| pool[i]).collect())
    }

    fn push_node<R: Rng + ?Sized>(&mut self, rng: &mut R, spec: &OperatorSpec, inputs: Vec<EdgeId>) -> EdgeId {
        let edge = self.fresh_edge();
        let node_id = NodeId(self.nodes.len() as u32);
        let mut attrs = Attrs::default();
        if spec.name == "Clamp" {
            attrs.clamp_min = Some(domains::CLAMP_MIN[rng.random_range(0..domains::CLAMP_MIN.len())]);
            attrs.clamp_max = Some(domains::CLAMP_MAX[rng.random_range(0..domains::CLAMP_MAX.len())]);
        }
        self.nodes.push(Node {
            node_id,
            op: spec.name.clone(),
            inputs,
            output: TensorRef { edge_id: edge, producer: Producer::Node(node_id), integer_typed: spec.integer_output },
            attrs,
        });
        self.candidates.push(edge);
        edge
    }

    fn finish(self) -> ProgramGraph {
        let consumed: BTreeSet<EdgeId> = self.nodes.iter().flat_map(|n| n.inputs.iter().copied()).collect();
        let mut outputs: Vec<EdgeId> = self
            .creates
            .iter()
            .map(|c| c.output.edge_id)
            .chain(self.nodes.iter().map(|n| n.output.edge_id))
            .filter(|e| !consumed.contains(e))
            .collect();
        outputs.sort();
        ProgramGraph { create_statements: self.creates, nodes: self.nodes, outputs }
    }
}

/// Difficulty level: the number of compute nodes.
pub fn level_of(graph: &ProgramGraph) -> u32 {
    graph.nodes.len() as u32
}

/// Digest that ignores edge numbering but sees ops, attributes and wiring.
pub fn structural_hash(graph: &ProgramGraph) -> u64 {
    digest_u64(graph.canonical_encoding().as_bytes())
}

pub(crate) fn digest_u64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_be_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl ProgramGraph {
    pub fn level(&self) -> u32 {
        level_of(self)
    }

    /// All tensor refs in edge-id order.
    pub fn edges(&self) -> Vec<TensorRef> {
        let mut all: Vec<TensorRef> = self
            .create_statements
            .iter()
            .map(|c| c.output)
            .chain(self.nodes.iter().map(|n| n.output))
            .collect();
        all.sort_by_key(|t| t.edge_id);
        all
    }

    pub fn edge_count(&self) -> usize {
        self.create_statements.len() + self.nodes.len()
    }

    pub fn edge(&self, id: EdgeId) -> Option<TensorRef> {
        self.create_statements
            .iter()
            .map(|c| c.output)
            .chain(self.nodes.iter().map(|n| n.output))
            .find(|t| t.edge_id == id)
    }

    /// Edge ids produced by create statements, in statement order.
    pub fn create_edges(&self) -> Vec<EdgeId> {
        self.create_statements.iter().map(|c| c.output.edge_id).collect()
    }

    /// Text form in which edges are named by their producer, so renumbering
    /// edges does not change it.
    pub fn canonical_encoding(&self) -> String {
        let mut label: BTreeMap<EdgeId, String> = BTreeMap::new();
        let mut out = String::new();
        for (i, c) in self.create_statements.iter().enumerate() {
            label.insert(c.output.edge_id, format!("c{i}"));
            out.push_str(&format!("c{i}={};", c.op));
        }
        for (j, n) in self.nodes.iter().enumerate() {
            let args: Vec<&str> = n
                .inputs
                .iter()
                .map(|e| label.get(e).map(String::as_str).unwrap_or("?"))
                .collect();
            let attrs = serde_json::to_string(&n.attrs).expect("attrs serialize");
            out.push_str(&format!("n{j}={}({}){attrs};", n.op, args.join(",")));
            label.insert(n.output.edge_id, format!("n{j}"));
        }
        let outs: Vec<&str> = self.outputs.iter().map(|e| label.get(e).map(String::as_str).unwrap_or("?")).collect();
        out.push_str(&format!("out=[{}]", outs.join(",")));
        out
    }

    /// Checks the structural invariants: unique edges, def-before-use, arity,
    /// and that `outputs` is exactly the set of unconsumed edges.
    pub fn validate(&self, catalog: &Catalog) -> Result<(), GraphError> {
        let bad = |msg: String| Err(GraphError::Invalid(msg));
        let mut defined: BTreeSet<EdgeId> = BTreeSet::new();
        for (i, c) in self.create_statements.iter().enumerate() {
            let spec = catalog.lookup(&c.op).map_err(|e| GraphError::Invalid(e.to_string()))?;
            if !spec.is_create() {
                return bad(format!("create statement {i} uses compute op {}", c.op));
            }
            if c.output.producer != Producer::Create(i as u32) {
                return bad(format!("create statement {i} has a wrong producer"));
            }
            if !defined.insert(c.output.edge_id) {
                return bad(format!("{} defined twice", c.output.edge_id));
            }
        }
        for (j, n) in self.nodes.iter().enumerate() {
            let spec = catalog.lookup(&n.op).map_err(|e| GraphError::Invalid(e.to_string()))?;
            if n.node_id != NodeId(j as u32) || n.output.producer != Producer::Node(n.node_id) {
                return bad(format!("node {j} is out of order"));
            }
            if spec.is_create() || spec.constraint_kind.is_none() {
                return bad(format!("{} uses create op {}", n.node_id, n.op));
            }
            if !spec.arity.accepts(n.inputs.len()) {
                return bad(format!("{} has {} inputs for {}", n.node_id, n.inputs.len(), n.op));
            }
            for e in &n.inputs {
                if !defined.contains(e) {
                    return bad(format!("{} uses {e} before it is defined", n.node_id));
                }
            }
            if !defined.insert(n.output.edge_id) {
                return bad(format!("{} defined twice", n.output.edge_id));
            }
        }
        let consumed: BTreeSet<EdgeId> = self.nodes.iter().flat_map(|n| n.inputs.iter().copied()).collect();
        let expected: BTreeSet<EdgeId> = defined.difference(&consumed).copied().collect();
        let actual: BTreeSet<EdgeId> = self.outputs.iter().copied().collect();
        if expected != actual || actual.len() != self.outputs.len() {
            return bad("outputs differ from the set of unconsumed edges".to_string());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<ProgramGraph, GraphError> {
        serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat() -> &'static Catalog {
        Catalog::standard()
    }

    #[test]
    fn single_add_has_forced_structure() {
        let g = build(&BuildConfig::new(1, BuildMode::Dag, 3).with_subset(["Add"]), cat()).unwrap();
        assert_eq!(g.create_statements.len(), 2);
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.outputs, vec![EdgeId(2)]);
        assert_eq!(g.nodes[0].inputs.iter().collect::<BTreeSet<_>>(), [EdgeId(0), EdgeId(1)].iter().collect());
        g.validate(cat()).unwrap();
    }

    #[test]
    fn chain_wires_previous_output_first() {
        for seed in 0..50 {
            let g = build(&BuildConfig::new(6, BuildMode::Chain, seed), cat()).unwrap();
            for w in g.nodes.windows(2) {
                assert_eq!(w[1].inputs[0], w[0].output.edge_id);
            }
            g.validate(cat()).unwrap();
        }
    }

    #[test]
    fn zero_level_is_rejected() {
        assert_eq!(build(&BuildConfig::new(0, BuildMode::Dag, 1), cat()), Err(BuildError::InvalidLevel));
        let empty: [&str; 0] = [];
        assert_eq!(
            build(&BuildConfig::new(1, BuildMode::Dag, 1).with_subset(empty), cat()),
            Err(BuildError::Catalog(CatalogError::EmptySubset))
        );
    }

    #[test]
    fn hash_sees_ops_but_not_numbering() {
        let g = build(&BuildConfig::new(1, BuildMode::Dag, 3).with_subset(["Add"]), cat()).unwrap();
        assert_eq!(structural_hash(&g), structural_hash(&g));

        let mut renumbered = g.clone();
        let shift = |e: EdgeId| EdgeId(e.0 * 10 + 5);
        for c in &mut renumbered.create_statements {
            c.output.edge_id = shift(c.output.edge_id);
        }
        for n in &mut renumbered.nodes {
            n.inputs = n.inputs.iter().map(|&e| shift(e)).collect();
            n.output.edge_id = shift(n.output.edge_id);
        }
        renumbered.outputs = renumbered.outputs.iter().map(|&e| shift(e)).collect();
        assert_eq!(structural_hash(&g), structural_hash(&renumbered));

        let mut mul = g.clone();
        mul.nodes[0].op = "Mul".into();
        assert_ne!(structural_hash(&g), structural_hash(&mul));
    }

    #[test]
    fn json_round_trip() {
        let g = build(&BuildConfig::new(5, BuildMode::Dag, 11), cat()).unwrap();
        assert_eq!(ProgramGraph::from_json(&g.to_json()).unwrap(), g);
    }
}
