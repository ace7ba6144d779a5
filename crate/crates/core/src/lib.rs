//! Synthetic tensor-program generation: random operator graphs, shape
//! constraint solving, source emission, fragment search planning and
//! reward arithmetic.

pub mod attrs;
pub mod catalog;
pub mod dataset;
pub mod emit;
pub mod fragment;
pub mod graph;
pub mod oracle;
pub mod reward;
pub mod seed;
pub mod shape;
pub mod solver;

pub use attrs::Attrs;
pub use catalog::{Catalog, OperatorSpec};
pub use emit::{emit, emit_with, parse_manifest, EmittedProgram, Manifest};
pub use graph::{build, BuildConfig, BuildMode, ProgramGraph};
pub use oracle::{infer, verify_program, MatchReport, ShapeReport};
pub use shape::{EdgeId, NodeId, Shape};
pub use solver::{emit_constraints, solve, solve_graph, ConstraintSet, GlobalLimits, ShapeSolution, SolverConfig};
