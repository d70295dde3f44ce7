//! Operator taxonomy, expansion modes, reference-set construction and the
//! scheduling heuristics that decide which operator runs where.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Direction, EngineError, ProposalEngine, ProposalRequest, ReferencePayload, TaskSpec};
use crate::graph::{BranchId, ExecState, GraphError, NodeId, RefKind, SolutionGraph, SolutionNode, SolutionPayload};
use crate::kb::KnowledgeEntry;
use crate::search::{rank_entries, MemoryTiers, TierEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    Draft,
    Debug,
    ImproveNormal,
    ImproveFE,
    ImproveCS,
    Fusion,
    /// Annotates a pending candidate; never creates a node.
    CodeReview,
    /// Finalization only.
    Ensemble,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 8] = [
        OperatorKind::Draft,
        OperatorKind::Debug,
        OperatorKind::ImproveNormal,
        OperatorKind::ImproveFE,
        OperatorKind::ImproveCS,
        OperatorKind::Fusion,
        OperatorKind::CodeReview,
        OperatorKind::Ensemble,
    ];

    pub fn is_improve(self) -> bool {
        matches!(
            self,
            OperatorKind::ImproveNormal | OperatorKind::ImproveFE | OperatorKind::ImproveCS
        )
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpansionMode {
    PrimaryOnly,
    IntraBranch,
    CrossBranch,
    MultiBranchAgg,
}

impl ExpansionMode {
    pub fn ref_kind(self) -> Option<RefKind> {
        match self {
            ExpansionMode::PrimaryOnly => None,
            ExpansionMode::IntraBranch => Some(RefKind::Hist),
            ExpansionMode::CrossBranch => Some(RefKind::Cross),
            ExpansionMode::MultiBranchAgg => Some(RefKind::Agg),
        }
    }
}

impl fmt::Display for ExpansionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub mode: ExpansionMode,
    pub members: Vec<NodeId>,
    pub rationale: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "detail")]
pub enum ReviewVerdict {
    Pass,
    Warn(Vec<String>),
    Reject(String),
}

impl ReviewVerdict {
    pub fn is_warn(&self) -> bool {
        matches!(self, ReviewVerdict::Warn(_))
    }

    pub fn is_reject(&self) -> bool {
        matches!(self, ReviewVerdict::Reject(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorBudgets {
    pub max_draft_num: usize,
    pub max_debug_num: u32,
    pub stagnation_window: usize,
    pub agg_min_trajectories: usize,
    pub agg_cooldown_steps: u64,
}

impl Default for OperatorBudgets {
    fn default() -> Self {
        OperatorBudgets {
            max_draft_num: 7,
            max_debug_num: 20,
            stagnation_window: 5,
            agg_min_trajectories: 5,
            agg_cooldown_steps: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCaps {
    pub max_history_num: usize,
    pub max_ref_num: usize,
    pub max_agg_num: usize,
}

impl Default for ReferenceCaps {
    fn default() -> Self {
        ReferenceCaps {
            max_history_num: 7,
            max_ref_num: 7,
            max_agg_num: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImproveWeights {
    pub normal: f64,
    pub fe: f64,
    pub cs: f64,
}

impl Default for ImproveWeights {
    fn default() -> Self {
        ImproveWeights {
            normal: 0.5,
            fe: 0.3,
            cs: 0.2,
        }
    }
}

impl ImproveWeights {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> OperatorKind {
        let total = self.normal + self.fe + self.cs;
        let x = rng.random::<f64>() * total;
        if x < self.normal {
            OperatorKind::ImproveNormal
        } else if x < self.normal + self.fe {
            OperatorKind::ImproveFE
        } else {
            OperatorKind::ImproveCS
        }
    }
}

/// Which reference-edge modes are enabled. All off is plain tree search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSwitches {
    pub intra_branch: bool,
    pub cross_branch: bool,
    pub aggregation: bool,
}

impl ModeSwitches {
    pub const ALL: ModeSwitches = ModeSwitches {
        intra_branch: true,
        cross_branch: true,
        aggregation: true,
    };
    pub const TREE: ModeSwitches = ModeSwitches {
        intra_branch: false,
        cross_branch: false,
        aggregation: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub budgets: OperatorBudgets,
    pub caps: ReferenceCaps,
    pub weights: ImproveWeights,
    pub modes: ModeSwitches,
    /// Primary children an evaluated node may receive before selection
    /// descends past it.
    pub max_children: usize,
    pub direction: Direction,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            budgets: OperatorBudgets::default(),
            caps: ReferenceCaps::default(),
            weights: ImproveWeights::default(),
            modes: ModeSwitches::ALL,
            max_children: 3,
            direction: Direction::Maximize,
        }
    }
}

/// Coordinator bookkeeping the scheduler needs beyond the graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SchedulerState {
    /// Expansions dispatched but not yet applied, per parent.
    pub pending_children: BTreeMap<NodeId, usize>,
    pub pending_drafts: usize,
    pub last_agg_step: u64,
    pub current_step: u64,
}

impl SchedulerState {
    fn pending(&self, id: NodeId) -> usize {
        self.pending_children.get(&id).copied().unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OperatorError {
    #[error("debug budget exhausted at {node} after {debug_count} repairs")]
    BudgetExhausted { node: NodeId, debug_count: u32 },
    #[error("node {0} is not expandable")]
    NotExpandable(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no qualifying reference nodes for {0}")]
    EmptyReferencePool(ExpansionMode),
}

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub fn root_drafts(graph: &SolutionGraph) -> usize {
    graph
        .children(NodeId::ROOT)
        .iter()
        .filter(|c| graph.nodes()[c.index()].operator_used == OperatorKind::Draft)
        .count()
}

fn evaluated_metric(node: &SolutionNode) -> Option<f64> {
    match node.state {
        ExecState::Evaluated => node.metric,
        _ => None,
    }
}

/// True iff the branch has at least `window` evaluated nodes and its running
/// best metric stayed constant over the last `window` of them.
pub fn is_stagnant(graph: &SolutionGraph, branch: BranchId, window: usize, direction: Direction) -> bool {
    let metrics: Vec<f64> = graph
        .branch_nodes(branch)
        .iter()
        .filter_map(|id| evaluated_metric(&graph.nodes()[id.index()]))
        .collect();
    if window == 0 || metrics.len() < window {
        return false;
    }
    let start = metrics.len() - window;
    let best = metrics[..=start]
        .iter()
        .copied()
        .reduce(|a, b| if direction.better(b, a) { b } else { a })
        .expect("non-empty");
    !metrics[start + 1..].iter().any(|&m| direction.better(m, best))
}

fn evaluated_count(graph: &SolutionGraph, branch: BranchId) -> usize {
    graph
        .branch_nodes(branch)
        .iter()
        .filter(|id| graph.nodes()[id.index()].state == ExecState::Evaluated)
        .count()
}

fn rich_branches(graph: &SolutionGraph, min_trajectories: usize) -> Vec<BranchId> {
    graph
        .branch_ids()
        .filter(|&b| evaluated_count(graph, b) >= min_trajectories)
        .collect()
}

/// At least two branches hold `agg_min_trajectories` evaluated nodes and the
/// cooldown since the last aggregation has elapsed.
pub fn aggregation_ready(
    graph: &SolutionGraph,
    budgets: &OperatorBudgets,
    last_agg_step: u64,
    current_step: u64,
) -> bool {
    current_step.saturating_sub(last_agg_step) >= budgets.agg_cooldown_steps
        && rich_branches(graph, budgets.agg_min_trajectories).len() >= 2
}

/// Whether selection may stop at `node`.
pub fn is_expandable(
    graph: &SolutionGraph,
    node: &SolutionNode,
    cfg: &SchedulerConfig,
    state: &SchedulerState,
) -> bool {
    let pending = state.pending(node.node_id);
    match node.state {
        ExecState::Root => {
            root_drafts(graph) + state.pending_drafts < cfg.budgets.max_draft_num
                || (cfg.modes.aggregation
                    && aggregation_ready(graph, &cfg.budgets, state.last_agg_step, state.current_step))
        }
        ExecState::Evaluated => graph.children(node.node_id).len() + pending < cfg.max_children,
        // one repair attempt per buggy node; the chain continues below it
        ExecState::Buggy => graph.children(node.node_id).is_empty() && pending == 0,
        ExecState::Drafted | ExecState::Failed => false,
    }
}

/// Picks the operator and expansion mode for `node`. A buggy node whose
/// debug chain is at the cap is marked `Failed`.
pub fn choose_operator<R: Rng + ?Sized>(
    graph: &mut SolutionGraph,
    node: NodeId,
    cfg: &SchedulerConfig,
    state: &SchedulerState,
    rng: &mut R,
) -> Result<(OperatorKind, ExpansionMode), OperatorError> {
    let n = graph.node(node).ok_or(OperatorError::UnknownNode(node))?;
    if n.is_root() {
        if root_drafts(graph) + state.pending_drafts < cfg.budgets.max_draft_num {
            return Ok((OperatorKind::Draft, ExpansionMode::PrimaryOnly));
        }
        if cfg.modes.aggregation && aggregation_ready(graph, &cfg.budgets, state.last_agg_step, state.current_step) {
            return Ok((OperatorKind::Fusion, ExpansionMode::MultiBranchAgg));
        }
        return Err(OperatorError::NotExpandable(node));
    }
    match n.state {
        ExecState::Buggy => {
            if n.debug_count < cfg.budgets.max_debug_num {
                Ok((OperatorKind::Debug, ExpansionMode::PrimaryOnly))
            } else {
                let debug_count = n.debug_count;
                graph
                    .set_outcome(node, ExecState::Failed, None)
                    .map_err(|_| OperatorError::UnknownNode(node))?;
                Err(OperatorError::BudgetExhausted { node, debug_count })
            }
        }
        ExecState::Evaluated => {
            let branch = n.branch_id;
            if cfg.modes.cross_branch && is_stagnant(graph, branch, cfg.budgets.stagnation_window, cfg.direction) {
                return Ok((OperatorKind::Fusion, ExpansionMode::CrossBranch));
            }
            let op = cfg.weights.sample(rng);
            let mode = if cfg.modes.intra_branch && evaluated_count(graph, branch) >= 1 {
                ExpansionMode::IntraBranch
            } else {
                ExpansionMode::PrimaryOnly
            };
            Ok((op, mode))
        }
        _ => Err(OperatorError::NotExpandable(node)),
    }
}

fn tier_entry(node: &SolutionNode) -> Option<TierEntry> {
    evaluated_metric(node).map(|metric| TierEntry {
        node_id: node.node_id,
        metric,
        created_step: node.created_step,
    })
}

/// Builds the reference set for a non-primary expansion of `node`.
pub fn build_reference_set(
    graph: &SolutionGraph,
    node: NodeId,
    mode: ExpansionMode,
    memory: &MemoryTiers,
    caps: &ReferenceCaps,
    agg_min_trajectories: usize,
) -> Result<ReferenceSet, OperatorError> {
    let target = graph.node(node).ok_or(OperatorError::UnknownNode(node))?;
    let direction = memory.direction;
    let (members, rationale) = match mode {
        ExpansionMode::PrimaryOnly => return Err(OperatorError::EmptyReferencePool(mode)),
        ExpansionMode::IntraBranch => {
            let members = nearest_in_branch(graph, target, caps.max_history_num);
            let r = format!("{} nearest nodes of branch {}", members.len(), target.branch_id);
            (members, r)
        }
        ExpansionMode::CrossBranch => {
            let mut pool: Vec<&SolutionNode> = graph
                .nodes()
                .iter()
                .filter(|n| !n.is_root() && n.branch_id != target.branch_id && n.node_id != node)
                .filter(|n| evaluated_metric(n).is_some())
                .collect();
            pool.sort_by(|a, b| {
                direction
                    .rank(a.metric.unwrap(), b.metric.unwrap())
                    .then(a.debug_count.cmp(&b.debug_count))
                    .then(a.created_step.cmp(&b.created_step))
            });
            let members: Vec<NodeId> = pool.iter().take(caps.max_ref_num).map(|n| n.node_id).collect();
            let r = format!(
                "top {} evaluated nodes outside branch {}",
                members.len(),
                target.branch_id
            );
            (members, r)
        }
        ExpansionMode::MultiBranchAgg => {
            let qualifying = rich_branches(graph, agg_min_trajectories);
            if qualifying.len() < 2 {
                return Err(OperatorError::EmptyReferencePool(mode));
            }
            let members = aggregate_tiers(memory, &qualifying, caps.max_agg_num, graph);
            let r = format!("top trajectories of branches {qualifying:?}");
            (members, r)
        }
    };
    if members.is_empty() {
        return Err(OperatorError::EmptyReferencePool(mode));
    }
    Ok(ReferenceSet {
        mode,
        members,
        rationale,
    })
}

/// Branch members ordered by primary-path distance to `target`, ancestors
/// before non-ancestors at equal distance, then most recent first.
fn nearest_in_branch(graph: &SolutionGraph, target: &SolutionNode, k: usize) -> Vec<NodeId> {
    let ancestors: BTreeMap<NodeId, u32> = graph
        .path_to_root(target.node_id)
        .unwrap_or_default()
        .into_iter()
        .map(|id| (id, graph.nodes()[id.index()].depth))
        .collect();
    let mut scored: Vec<(u32, bool, u64, NodeId)> = graph
        .branch_nodes(target.branch_id)
        .iter()
        .filter(|&&id| id != target.node_id)
        .map(|&id| {
            let node = &graph.nodes()[id.index()];
            let mut cur = node;
            while !ancestors.contains_key(&cur.node_id) {
                cur = &graph.nodes()[cur.parent_id.expect("non-root").index()];
            }
            let lca_depth = cur.depth;
            let distance = node.depth + target.depth - 2 * lca_depth;
            let is_ancestor = ancestors.contains_key(&id);
            (distance, !is_ancestor, u64::MAX - node.created_step, id)
        })
        .collect();
    scored.sort();
    scored.into_iter().take(k).map(|t| t.3).collect()
}

/// Best node of each qualifying branch first, then the remaining tier
/// entries by metric; the result is ordered by metric.
fn aggregate_tiers(memory: &MemoryTiers, branches: &[BranchId], cap: usize, graph: &SolutionGraph) -> Vec<NodeId> {
    let direction = memory.direction;
    let mut heads: Vec<TierEntry> = Vec::new();
    let mut rest: Vec<TierEntry> = Vec::new();
    for &b in branches {
        let tier = memory.branch(b);
        if tier.is_empty() {
            // tiers lag only if memory was not fed; fall back to the graph
            let mut entries: Vec<TierEntry> = graph
                .branch_nodes(b)
                .iter()
                .filter_map(|id| tier_entry(&graph.nodes()[id.index()]))
                .collect();
            entries.sort_by(|x, y| rank_entries(direction, x, y));
            entries.truncate(memory.branch_top_k);
            if let Some((h, r)) = entries.split_first() {
                heads.push(*h);
                rest.extend_from_slice(r);
            }
        } else {
            heads.push(tier[0]);
            rest.extend_from_slice(&tier[1..]);
        }
    }
    heads.sort_by(|x, y| rank_entries(direction, x, y));
    rest.sort_by(|x, y| rank_entries(direction, x, y));
    let mut chosen: Vec<TierEntry> = heads.into_iter().take(cap).collect();
    let room = cap.saturating_sub(chosen.len());
    chosen.extend(rest.into_iter().take(room));
    chosen.sort_by(|x, y| rank_entries(direction, x, y));
    chosen.into_iter().map(|e| e.node_id).collect()
}

/// A proposed payload together with its review verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub payload: SolutionPayload,
    pub verdict: ReviewVerdict,
}

pub fn code_review(candidate: &SolutionPayload, task: &TaskSpec, engine: &dyn ProposalEngine) -> ReviewVerdict {
    engine.review(candidate, task)
}

/// Assembles the engine request for expanding `parent` with `op`.
pub fn prepare_request(
    graph: &SolutionGraph,
    parent: NodeId,
    op: OperatorKind,
    refs: Option<&ReferenceSet>,
    task: &TaskSpec,
    kb_snippets: Vec<KnowledgeEntry>,
    seed: u64,
) -> Result<ProposalRequest, GraphError> {
    let target = graph.node(parent).ok_or(GraphError::UnknownNode(parent))?;
    let reference_payloads = refs
        .map(|r| {
            r.members
                .iter()
                .map(|&id| {
                    let n = graph.node(id).ok_or(GraphError::UnknownNode(id))?;
                    Ok(ReferencePayload {
                        node_id: id,
                        payload: n.payload.clone(),
                        metric: n.metric,
                        state: n.state,
                    })
                })
                .collect::<Result<Vec<_>, GraphError>>()
        })
        .transpose()?
        .unwrap_or_default();
    Ok(ProposalRequest {
        operator: op,
        target_payload: target.payload.clone(),
        target_metric: target.metric,
        reference_payloads,
        task: task.clone(),
        kb_snippets,
        seed,
    })
}

/// Calls the engine and reviews the result.
pub fn generate(engine: &dyn ProposalEngine, req: &ProposalRequest) -> Result<Candidate, EngineError> {
    let payload = engine.propose(req)?;
    let verdict = code_review(&payload, &req.task, engine);
    Ok(Candidate { payload, verdict })
}

/// Adds the candidate under `parent` and wires its reference edges. A
/// rejected candidate is created directly in the `Failed` state.
pub fn attach_candidate(
    graph: &mut SolutionGraph,
    parent: NodeId,
    op: OperatorKind,
    refs: Option<&ReferenceSet>,
    candidate: &Candidate,
) -> Result<NodeId, GraphError> {
    let id = graph.add_child(parent, candidate.payload.clone(), op)?;
    if let Some(r) = refs {
        let kind = r.mode.ref_kind().unwrap_or(RefKind::Agg);
        if !r.members.is_empty() {
            graph.add_reference_edges(&r.members, id, kind)?;
        }
    }
    if candidate.verdict.is_reject() {
        graph.set_outcome(id, ExecState::Failed, None)?;
    }
    Ok(id)
}

/// One synchronous expansion: request, propose, review, attach.
/// `MultiBranchAgg` always expands under the root.
#[allow(clippy::too_many_arguments)]
pub fn expand(
    graph: &mut SolutionGraph,
    node: NodeId,
    op: OperatorKind,
    refs: Option<&ReferenceSet>,
    engine: &dyn ProposalEngine,
    task: &TaskSpec,
    kb_context: Vec<KnowledgeEntry>,
    seed: u64,
) -> Result<NodeId, ExpandError> {
    let parent = match refs.map(|r| r.mode) {
        Some(ExpansionMode::MultiBranchAgg) => NodeId::ROOT,
        _ => node,
    };
    let req = prepare_request(graph, parent, op, refs, task, kb_context, seed)?;
    let candidate = generate(engine, &req)?;
    Ok(attach_candidate(graph, parent, op, refs, &candidate)?)
}

/// Branches spanned by a set of nodes.
pub fn branches_of(graph: &SolutionGraph, members: &[NodeId]) -> BTreeSet<BranchId> {
    members
        .iter()
        .filter_map(|id| graph.node(*id))
        .map(|n| n.branch_id)
        .collect()
}
