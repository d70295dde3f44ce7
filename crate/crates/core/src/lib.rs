//! Monte Carlo Graph Search over candidate solutions.
//!
//! Solutions live in a [`graph::SolutionGraph`]: a primary tree of
//! parent/child refinements plus reference edges that carry context
//! between branches. [`orchestrator`] drives select, expand, simulate and
//! backpropagate over it using a pluggable [`engine::ProposalEngine`] and
//! [`engine::Environment`].

pub mod engine;
pub mod graph;
pub mod kb;
pub mod operators;
pub mod orchestrator;
pub mod search;
pub mod seed;

pub use engine::{Direction, EngineError, Environment, EvalOutcome, ProposalEngine, ProposalRequest, TaskSpec};
pub use graph::{
    BranchId, EdgeKind, EdgeRecord, ExecState, GraphSnapshot, NodeId, RefKind, SolutionGraph, SolutionNode,
    SolutionPayload, StructureReport,
};
pub use kb::{KnowledgeBase, KnowledgeEntry, KnowledgeLevel};
pub use operators::{ExpansionMode, OperatorKind, ReferenceSet, ReviewVerdict};
pub use orchestrator::{run, RunConfig, Summary};
pub use search::{MemoryTiers, RewardRecord, SearchPolicyConfig};
