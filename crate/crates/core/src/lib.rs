//! Query DAGs for discrete belief networks: compile a network into an
//! arithmetic circuit, shrink the circuit with equivalence-preserving
//! rewrites, and answer queries by incremental evaluation as evidence
//! arrives and is retracted.

pub mod circuit;
pub mod cli;
pub mod compiler;
pub mod evaluator;
pub mod oracle;
pub mod reducer;

pub use circuit::{NodeId, NodeKind, QDag};
pub use compiler::{compile, parse_network, BeliefNetwork, CompileSpec};
pub use evaluator::{initialize, Evidence, Mode, ValueState};
pub use reducer::{reduce, ReductionReport};
