//! Shape constraint solving.
//!
//! [`emit_constraints`] turns a program graph into a [`ConstraintSet`]: one block
//! per node naming the shape rule its operator obeys, plus the global FLOP and
//! size budgets. [`solve`] finds a random integer assignment of orders,
//! dimension sizes and shape-relevant attributes; [`check`] re-evaluates any
//! assignment against the same rules with exact arithmetic.
//!
//! The search runs in three nested phases, each a randomized depth-first search
//! with propagation: tensor orders, then per-node structural choices (axes,
//! stride/padding/dilation/groups, which broadcast operands are size 1), then
//! dimension sizes over an integer interval model. A failure budget bounds each
//! run; runs restart with Luby-scheduled budgets until the time or work budget
//! expires. A run that exhausts its search tree without touching its failure
//! budget proves the constraint set infeasible.

mod check;
mod model;
mod orders;
mod search;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrs::Attrs;
use crate::catalog::{Catalog, CatalogError, ConstraintKind, FlopModel, OperatorSpec};
use crate::graph::{ProgramGraph, Producer};
use crate::shape::{EdgeId, NodeId, Shape};

pub use check::{check, CheckError, Violation};

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("operator `{0}` has no shape rule")]
    UnknownConstraintKind(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("constraint set is infeasible: {0}")]
    Infeasible(String),
    #[error("time budget of {0:?} exhausted")]
    TimedOut(Duration),
    #[error("work budget exhausted after {0} search steps")]
    WorkExhausted(u64),
    #[error("solver produced an assignment that fails verification: {0}")]
    Internal(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Global budgets on total work and memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalLimits {
    pub min_flops: u64,
    pub max_flops: u64,
    /// Upper bound on the summed element count of every edge.
    pub max_size: u64,
    /// Lower bound on each edge's element count (order-0 edges are exempt).
    pub min_size_tensor: u64,
}

impl Default for GlobalLimits {
    fn default() -> Self {
        GlobalLimits { min_flops: 1_000_000, max_flops: 10_000_000_000, max_size: 1 << 26, min_size_tensor: 16 }
    }
}

impl GlobalLimits {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.min_flops > self.max_flops {
            return Err(SolveError::InvalidConfig("min_flops exceeds max_flops".into()));
        }
        if self.min_size_tensor == 0 {
            return Err(SolveError::InvalidConfig("min_size_tensor must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(flatten)]
    pub limits: GlobalLimits,
    /// Wall-clock budget in seconds.
    pub time_budget: f64,
    pub seed: u64,
    /// Optional cap on search steps. Unlike the time budget it gives the same
    /// outcome on every machine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_work: Option<u64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { limits: GlobalLimits::default(), time_budget: 10.0, seed: 0, max_work: None }
    }
}

impl SolverConfig {
    pub fn with_seed(seed: u64) -> Self {
        SolverConfig { seed, ..Default::default() }
    }

    pub fn budget(&self) -> Duration {
        Duration::from_secs_f64(self.time_budget.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeVar {
    pub edge: EdgeId,
    pub from_create: bool,
    pub integer_typed: bool,
}

/// The constraint block contributed by one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub node: NodeId,
    pub spec: OperatorSpec,
    pub kind: ConstraintKind,
    pub inputs: Vec<EdgeId>,
    pub output: EdgeId,
    /// Attributes fixed before solving; `None` fields are chosen by the solver.
    pub attrs: Attrs,
}

impl Block {
    pub fn carries_flops(&self) -> bool {
        self.spec.flop_model != FlopModel::Zero
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// One variable group per edge, in edge-id order.
    pub edges: Vec<EdgeVar>,
    pub blocks: Vec<Block>,
    pub limits: GlobalLimits,
    /// False when no node can contribute work, in which case only the upper
    /// FLOP bound applies.
    pub enforce_min_flops: bool,
    /// Edges whose shape is fixed in advance.
    #[serde(default)]
    pub pins: BTreeMap<EdgeId, Shape>,
}

impl ConstraintSet {
    pub fn pin(&mut self, edge: EdgeId, shape: Shape) -> &mut Self {
        self.pins.insert(edge, shape);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSolution {
    pub shapes: BTreeMap<EdgeId, Shape>,
    pub attrs: BTreeMap<NodeId, Attrs>,
    pub total_flops: u64,
    pub total_numel: u64,
}

impl ShapeSolution {
    pub fn shape(&self, edge: EdgeId) -> Option<&Shape> {
        self.shapes.get(&edge)
    }
}

/// Builds the constraint set of `graph` under `limits`.
pub fn emit_constraints(graph: &ProgramGraph, catalog: &Catalog, limits: GlobalLimits) -> Result<ConstraintSet, ConstraintError> {
    let edges = graph
        .edges()
        .into_iter()
        .map(|t| EdgeVar { edge: t.edge_id, from_create: matches!(t.producer, Producer::Create(_)), integer_typed: t.integer_typed })
        .collect();
    let mut blocks = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let spec = catalog.lookup(&node.op)?;
        let kind = spec.constraint_kind.ok_or_else(|| ConstraintError::UnknownConstraintKind(node.op.clone()))?;
        blocks.push(Block {
            node: node.node_id,
            spec: spec.clone(),
            kind,
            inputs: node.inputs.clone(),
            output: node.output.edge_id,
            attrs: node.attrs.clone(),
        });
    }
    let enforce_min_flops = blocks.iter().any(Block::carries_flops);
    Ok(ConstraintSet { edges, blocks, limits, enforce_min_flops, pins: BTreeMap::new() })
}

/// Searches for an assignment satisfying `cs`. The time budget and seed come
/// from `cfg`; the global limits are those recorded in `cs`.
pub fn solve(cs: &ConstraintSet, cfg: &SolverConfig) -> Result<ShapeSolution, SolveError> {
    cs.limits.validate()?;
    let solution = search::run(cs, cfg.seed, cfg.budget(), cfg.max_work)?;
    let violations = check(&solution, cs).map_err(|e| SolveError::Internal(e.to_string()))?;
    if let Some(v) = violations.first() {
        return Err(SolveError::Internal(format!("{} violation(s), first: {v}", violations.len())));
    }
    Ok(solution)
}

/// Cheap necessary condition for feasibility: arc consistency over tensor
/// orders leaves every edge at least one order.
pub fn orders_consistent(cs: &ConstraintSet) -> bool {
    search::orders_consistent(cs)
}

/// Emits constraints under `cfg.limits` and solves them.
pub fn solve_graph(graph: &ProgramGraph, catalog: &Catalog, cfg: &SolverConfig) -> Result<ShapeSolution, SolveError> {
    let cs = emit_constraints(graph, catalog, cfg.limits)?;
    solve(&cs, cfg)
}
