//! Solution graph: a tree of primary (generative) edges rooted at `v0`,
//! overlaid with immutable reference edges that record which existing
//! nodes informed a new one.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operators::OperatorKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Identifier of a root-child subtree: the node id of that root child.
/// The root itself carries `BranchId(0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchId(pub u64);

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecState {
    Root,
    Drafted,
    /// Execution errored but the node may be repaired by Debug.
    Buggy,
    Evaluated,
    /// Terminal: rejected by review or out of repair budget.
    Failed,
}

impl ExecState {
    pub fn is_simulated(self) -> bool {
        matches!(self, ExecState::Evaluated | ExecState::Buggy | ExecState::Failed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionPayload {
    pub plan: String,
    /// Engine-specific blob: a JSON design for the synthetic engine,
    /// source text for the LLM engine.
    pub artifact: String,
    pub analysis: String,
    pub provenance: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub visits: u64,
    /// Accumulated (summed) reward.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionNode {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub branch_id: BranchId,
    pub depth: u32,
    pub payload: SolutionPayload,
    pub state: ExecState,
    pub metric: Option<f64>,
    pub stats: NodeStats,
    pub created_step: u64,
    /// Length of the run of consecutive Debug applications ending at this node.
    pub debug_count: u32,
    pub operator_used: OperatorKind,
}

impl SolutionNode {
    pub fn is_root(&self) -> bool {
        self.parent_id.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Primary,
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RefKind {
    Hist,
    Cross,
    Agg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub source: NodeId,
    pub target: NodeId,
    pub kind: EdgeKind,
    pub ref_kind: Option<RefKind>,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("unknown parent {0}")]
    UnknownParent(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("graph is finalized")]
    GraphFinalized,
    #[error("reference source {from} (step {source_step}) is not older than target {target} (step {target_step})")]
    BackwardReference {
        from: NodeId,
        target: NodeId,
        source_step: u64,
        target_step: u64,
    },
    #[error("edge {0} -> {1} already exists")]
    DuplicateEdge(NodeId, NodeId),
    #[error("reference edge set is empty")]
    EmptySources,
}

/// JSON document form of a graph: exactly the node and edge records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub nodes: Vec<SolutionNode>,
    pub edges: Vec<EdgeRecord>,
}

impl GraphSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Debug)]
pub struct SolutionGraph {
    nodes: Vec<SolutionNode>,
    edges: Vec<EdgeRecord>,
    children: Vec<Vec<NodeId>>,
    branches: BTreeMap<BranchId, Vec<NodeId>>,
    clock: u64,
    finalized: bool,
}

impl Default for SolutionGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl SolutionGraph {
    /// A graph holding only the root `v0`.
    pub fn new() -> Self {
        let root = SolutionNode {
            node_id: NodeId::ROOT,
            parent_id: None,
            branch_id: BranchId(0),
            depth: 0,
            payload: SolutionPayload {
                plan: "root".into(),
                ..Default::default()
            },
            state: ExecState::Root,
            metric: None,
            stats: NodeStats::default(),
            created_step: 0,
            debug_count: 0,
            operator_used: OperatorKind::Draft,
        };
        SolutionGraph {
            nodes: vec![root],
            edges: Vec::new(),
            children: vec![Vec::new()],
            branches: BTreeMap::new(),
            clock: 0,
            finalized: false,
        }
    }

    /// Rebuilds a graph from a snapshot without validating it; use
    /// [`validate_structure`] to inspect the result.
    pub fn from_snapshot(snapshot: GraphSnapshot) -> Self {
        let n = snapshot.nodes.len();
        let mut children = vec![Vec::new(); n];
        let mut branches: BTreeMap<BranchId, Vec<NodeId>> = BTreeMap::new();
        for node in &snapshot.nodes {
            if let Some(p) = node.parent_id {
                if p.index() < n {
                    children[p.index()].push(node.node_id);
                }
                branches.entry(node.branch_id).or_default().push(node.node_id);
            }
        }
        let clock = snapshot.nodes.iter().map(|n| n.created_step).max().unwrap_or(0);
        SolutionGraph {
            nodes: snapshot.nodes,
            edges: snapshot.edges,
            children,
            branches,
            clock,
            finalized: false,
        }
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        }
    }

    pub fn root(&self) -> &SolutionNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&SolutionNode> {
        self.nodes.get(id.index())
    }

    pub fn nodes(&self) -> &[SolutionNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    /// Primary-edge children in creation order.
    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(id.index()).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Non-root members of a branch in creation order.
    pub fn branch_nodes(&self, branch: BranchId) -> &[NodeId] {
        self.branches.get(&branch).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn branch_ids(&self) -> impl Iterator<Item = BranchId> + '_ {
        self.branches.keys().copied()
    }

    /// Incoming reference edges of `id`.
    pub fn references_into(&self, id: NodeId) -> impl Iterator<Item = &EdgeRecord> {
        self.edges
            .iter()
            .filter(move |e| e.kind == EdgeKind::Reference && e.target == id)
    }

    /// Primary path from `id` up to the root, inclusive at both ends.
    pub fn path_to_root(&self, id: NodeId) -> Option<Vec<NodeId>> {
        let mut path = Vec::new();
        let mut cur = self.node(id)?;
        loop {
            path.push(cur.node_id);
            match cur.parent_id {
                Some(p) => cur = self.node(p)?,
                None => return Some(path),
            }
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Sets the step stamped on subsequently created nodes. Under parallel
    /// dispatch results may land out of order, so this is the dispatch step
    /// of the job being applied rather than a monotone counter.
    pub fn set_clock(&mut self, step: u64) {
        self.clock = step;
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn finalize(&mut self) {
        self.finalized = true;
    }

    pub fn add_child(
        &mut self,
        parent: NodeId,
        mut payload: SolutionPayload,
        operator: OperatorKind,
    ) -> Result<NodeId, GraphError> {
        if self.finalized {
            return Err(GraphError::GraphFinalized);
        }
        let parent_node = self.node(parent).ok_or(GraphError::UnknownParent(parent))?;
        let id = NodeId(self.nodes.len() as u64);
        let branch_id = if parent_node.is_root() {
            BranchId(id.0)
        } else {
            parent_node.branch_id
        };
        let debug_count = if operator == OperatorKind::Debug {
            parent_node.debug_count + 1
        } else {
            0
        };
        payload.provenance.clear();
        let node = SolutionNode {
            node_id: id,
            parent_id: Some(parent),
            branch_id,
            depth: parent_node.depth + 1,
            payload,
            state: ExecState::Drafted,
            metric: None,
            stats: NodeStats::default(),
            created_step: self.clock,
            debug_count,
            operator_used: operator,
        };
        self.nodes.push(node);
        self.children.push(Vec::new());
        self.children[parent.index()].push(id);
        self.branches.entry(branch_id).or_default().push(id);
        self.edges.push(EdgeRecord {
            source: parent,
            target: id,
            kind: EdgeKind::Primary,
            ref_kind: None,
        });
        Ok(id)
    }

    /// Adds one reference edge per source into `target`. All-or-nothing:
    /// on error nothing is added.
    pub fn add_reference_edges(
        &mut self,
        sources: &[NodeId],
        target: NodeId,
        ref_kind: RefKind,
    ) -> Result<usize, GraphError> {
        if sources.is_empty() {
            return Err(GraphError::EmptySources);
        }
        let target_step = self.node(target).ok_or(GraphError::UnknownNode(target))?.created_step;
        let mut seen = BTreeSet::new();
        for &s in sources {
            let src = self.node(s).ok_or(GraphError::UnknownNode(s))?;
            if src.created_step >= target_step {
                return Err(GraphError::BackwardReference {
                    from: s,
                    target,
                    source_step: src.created_step,
                    target_step,
                });
            }
            let exists = self.edges.iter().any(|e| e.source == s && e.target == target);
            if exists || !seen.insert(s) {
                return Err(GraphError::DuplicateEdge(s, target));
            }
        }
        for &s in sources {
            self.edges.push(EdgeRecord {
                source: s,
                target,
                kind: EdgeKind::Reference,
                ref_kind: Some(ref_kind),
            });
        }
        self.nodes[target.index()].payload.provenance.extend_from_slice(sources);
        Ok(sources.len())
    }

    /// Records a simulation outcome. `metric` is kept only for `Evaluated`.
    pub fn set_outcome(&mut self, id: NodeId, state: ExecState, metric: Option<f64>) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(id.index()).ok_or(GraphError::UnknownNode(id))?;
        node.state = state;
        node.metric = if state == ExecState::Evaluated { metric } else { None };
        Ok(())
    }

    pub(crate) fn stats_mut(&mut self, id: NodeId) -> Option<&mut NodeStats> {
        self.nodes.get_mut(id.index()).map(|n| &mut n.stats)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    RootCount(usize),
    RootState(NodeId),
    NodeIdMismatch { position: usize, node: NodeId },
    PrimaryParents { node: NodeId, count: usize },
    ParentMismatch { node: NodeId },
    DepthMismatch { node: NodeId },
    BranchMismatch { node: NodeId },
    MetricState { node: NodeId },
    StatsInconsistent { node: NodeId },
    DanglingEdge { source: NodeId, target: NodeId },
    RefKindMismatch { source: NodeId, target: NodeId },
    BackwardReference { source: NodeId, target: NodeId },
    DuplicateEdge { source: NodeId, target: NodeId },
    Cycle { nodes: Vec<NodeId> },
    ProvenanceMismatch { node: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            RootCount(n) => write!(f, "expected exactly one root, found {n}"),
            RootState(n) => write!(f, "root {n} must have state Root and no metric"),
            NodeIdMismatch { position, node } => {
                write!(f, "node at position {position} has id {node}")
            }
            PrimaryParents { node, count } => {
                write!(f, "{node} has {count} incoming primary edges")
            }
            ParentMismatch { node } => write!(f, "{node}: parent_id disagrees with its primary edge"),
            DepthMismatch { node } => write!(f, "{node}: depth is not parent depth + 1"),
            BranchMismatch { node } => write!(f, "{node}: branch_id not inherited correctly"),
            MetricState { node } => write!(f, "{node}: metric present iff Evaluated violated"),
            StatsInconsistent { node } => write!(f, "{node}: zero visits with nonzero value"),
            DanglingEdge { source, target } => write!(f, "edge {source} -> {target} has unknown endpoint"),
            RefKindMismatch { source, target } => {
                write!(
                    f,
                    "edge {source} -> {target}: ref_kind must be set iff kind = Reference"
                )
            }
            BackwardReference { source, target } => {
                write!(f, "reference {source} -> {target} does not point forward in time")
            }
            DuplicateEdge { source, target } => write!(f, "duplicate edge {source} -> {target}"),
            Cycle { nodes } => write!(f, "cycle through {nodes:?}"),
            ProvenanceMismatch { node } => {
                write!(f, "{node}: provenance differs from incoming reference sources")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StructureReport {
    pub violations: Vec<Violation>,
}

impl StructureReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for StructureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant; an empty report means the graph is valid.
pub fn validate_structure(graph: &SolutionGraph) -> StructureReport {
    let mut out = Vec::new();
    let nodes = &graph.nodes;
    let n = nodes.len();

    for (i, node) in nodes.iter().enumerate() {
        if node.node_id.index() != i {
            out.push(Violation::NodeIdMismatch {
                position: i,
                node: node.node_id,
            });
        }
    }
    let roots: Vec<&SolutionNode> = nodes.iter().filter(|n| n.parent_id.is_none()).collect();
    if roots.len() != 1 {
        out.push(Violation::RootCount(roots.len()));
    }
    for r in &roots {
        if r.state != ExecState::Root || r.metric.is_some() {
            out.push(Violation::RootState(r.node_id));
        }
    }

    let known = |id: NodeId| id.index() < n;
    let mut primary_in: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    let mut ref_in: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); n];
    let mut pairs = BTreeSet::new();
    for e in &graph.edges {
        if !known(e.source) || !known(e.target) {
            out.push(Violation::DanglingEdge {
                source: e.source,
                target: e.target,
            });
            continue;
        }
        if !pairs.insert((e.source, e.target)) {
            out.push(Violation::DuplicateEdge {
                source: e.source,
                target: e.target,
            });
        }
        match (e.kind, e.ref_kind) {
            (EdgeKind::Primary, None) => primary_in[e.target.index()].push(e.source),
            (EdgeKind::Reference, Some(_)) => {
                ref_in[e.target.index()].insert(e.source);
                if nodes[e.source.index()].created_step >= nodes[e.target.index()].created_step {
                    out.push(Violation::BackwardReference {
                        source: e.source,
                        target: e.target,
                    });
                }
            }
            _ => out.push(Violation::RefKindMismatch {
                source: e.source,
                target: e.target,
            }),
        }
    }

    for (i, node) in nodes.iter().enumerate() {
        let id = node.node_id;
        if (node.state == ExecState::Evaluated) != node.metric.is_some() && node.state != ExecState::Root {
            out.push(Violation::MetricState { node: id });
        }
        if node.stats.visits == 0 && node.stats.value != 0.0 {
            out.push(Violation::StatsInconsistent { node: id });
        }
        let provenance: BTreeSet<NodeId> = node.payload.provenance.iter().copied().collect();
        if provenance != ref_in[i] || provenance.len() != node.payload.provenance.len() {
            out.push(Violation::ProvenanceMismatch { node: id });
        }
        let Some(parent) = node.parent_id else {
            if !primary_in[i].is_empty() {
                out.push(Violation::PrimaryParents {
                    node: id,
                    count: primary_in[i].len(),
                });
            }
            continue;
        };
        if primary_in[i].len() != 1 {
            out.push(Violation::PrimaryParents {
                node: id,
                count: primary_in[i].len(),
            });
        } else if primary_in[i][0] != parent {
            out.push(Violation::ParentMismatch { node: id });
        }
        let Some(p) = nodes.get(parent.index()) else {
            out.push(Violation::ParentMismatch { node: id });
            continue;
        };
        if node.depth != p.depth + 1 {
            out.push(Violation::DepthMismatch { node: id });
        }
        let expected_branch = if p.parent_id.is_none() {
            BranchId(id.0)
        } else {
            p.branch_id
        };
        if node.branch_id != expected_branch {
            out.push(Violation::BranchMismatch { node: id });
        }
    }

    if let Some(cycle) = find_cycle(n, &graph.edges) {
        out.push(Violation::Cycle { nodes: cycle });
    }
    StructureReport { violations: out }
}

/// Kahn's algorithm over all edges; returns the nodes left unsorted.
fn find_cycle(n: usize, edges: &[EdgeRecord]) -> Option<Vec<NodeId>> {
    let mut indeg = vec![0usize; n];
    let mut out_adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in edges {
        let (s, t) = (e.source.index(), e.target.index());
        if s < n && t < n {
            out_adj[s].push(t);
            indeg[t] += 1;
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(u) = queue.pop_front() {
        seen += 1;
        for &v in &out_adj[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    (seen < n).then(|| (0..n).filter(|&i| indeg[i] > 0).map(|i| NodeId(i as u64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(plan: &str) -> SolutionPayload {
        SolutionPayload {
            plan: plan.into(),
            ..Default::default()
        }
    }

    fn chain(graph: &mut SolutionGraph, len: usize) -> Vec<NodeId> {
        let mut ids = vec![NodeId::ROOT];
        for i in 0..len {
            graph.set_clock(i as u64 + 1);
            let id = graph
                .add_child(*ids.last().unwrap(), payload("c"), OperatorKind::ImproveNormal)
                .unwrap();
            ids.push(id);
        }
        ids
    }

    #[test]
    fn root_children_start_branches() {
        let mut g = SolutionGraph::new();
        g.set_clock(1);
        let a = g.add_child(NodeId::ROOT, payload("a"), OperatorKind::Draft).unwrap();
        let b = g.add_child(NodeId::ROOT, payload("b"), OperatorKind::Draft).unwrap();
        let na = g.node(a).unwrap();
        assert_eq!(na.depth, 1);
        assert_eq!(na.branch_id, BranchId(a.0));
        assert_eq!(na.state, ExecState::Drafted);
        assert_eq!(na.stats, NodeStats::default());
        assert_ne!(g.node(b).unwrap().branch_id, na.branch_id);
    }

    #[test]
    fn deep_child_inherits_branch() {
        let mut g = SolutionGraph::new();
        let ids = chain(&mut g, 3);
        let leaf = g.add_child(ids[3], payload("d"), OperatorKind::ImproveFE).unwrap();
        let node = g.node(leaf).unwrap();
        assert_eq!(node.depth, 4);
        assert_eq!(node.branch_id, BranchId(ids[1].0));
    }

    #[test]
    fn unknown_parent_and_finalized() {
        let mut g = SolutionGraph::new();
        assert_eq!(
            g.add_child(NodeId(42), payload("x"), OperatorKind::Draft),
            Err(GraphError::UnknownParent(NodeId(42)))
        );
        g.finalize();
        assert_eq!(
            g.add_child(NodeId::ROOT, payload("x"), OperatorKind::Draft),
            Err(GraphError::GraphFinalized)
        );
    }

    #[test]
    fn debug_count_tracks_consecutive_debugs() {
        let mut g = SolutionGraph::new();
        let a = g.add_child(NodeId::ROOT, payload("a"), OperatorKind::Draft).unwrap();
        let b = g.add_child(a, payload("b"), OperatorKind::Debug).unwrap();
        let c = g.add_child(b, payload("c"), OperatorKind::Debug).unwrap();
        let d = g.add_child(c, payload("d"), OperatorKind::ImproveCS).unwrap();
        assert_eq!(g.node(c).unwrap().debug_count, 2);
        assert_eq!(g.node(d).unwrap().debug_count, 0);
    }

    #[test]
    fn reference_edges_update_provenance() {
        let mut g = SolutionGraph::new();
        g.set_clock(3);
        let a = g.add_child(NodeId::ROOT, payload("a"), OperatorKind::Draft).unwrap();
        g.set_clock(5);
        let b = g.add_child(NodeId::ROOT, payload("b"), OperatorKind::Draft).unwrap();
        g.set_clock(9);
        let t = g.add_child(NodeId::ROOT, payload("t"), OperatorKind::Fusion).unwrap();
        assert_eq!(g.add_reference_edges(&[a, b], t, RefKind::Agg), Ok(2));
        assert_eq!(g.node(t).unwrap().payload.provenance, vec![a, b]);
        assert!(validate_structure(&g).is_valid());
    }

    #[test]
    fn reference_errors() {
        let mut g = SolutionGraph::new();
        g.set_clock(9);
        let t = g.add_child(NodeId::ROOT, payload("t"), OperatorKind::Draft).unwrap();
        g.set_clock(12);
        let late = g.add_child(NodeId::ROOT, payload("late"), OperatorKind::Draft).unwrap();
        assert!(matches!(
            g.add_reference_edges(&[late], t, RefKind::Hist),
            Err(GraphError::BackwardReference { .. })
        ));
        assert_eq!(
            g.add_reference_edges(&[], t, RefKind::Hist),
            Err(GraphError::EmptySources)
        );
        // an existing primary edge cannot be duplicated as a reference
        g.set_clock(13);
        let c = g.add_child(t, payload("c"), OperatorKind::ImproveNormal).unwrap();
        assert_eq!(
            g.add_reference_edges(&[t], c, RefKind::Hist),
            Err(GraphError::DuplicateEdge(t, c))
        );
        assert!(g.node(c).unwrap().payload.provenance.is_empty());
    }

    #[test]
    fn two_primary_parents_reported() {
        let mut g = SolutionGraph::new();
        let ids = chain(&mut g, 3);
        let mut snap = g.snapshot();
        snap.edges.push(EdgeRecord {
            source: ids[1],
            target: ids[3],
            kind: EdgeKind::Primary,
            ref_kind: None,
        });
        let report = validate_structure(&SolutionGraph::from_snapshot(snap));
        assert!(report
            .violations
            .contains(&Violation::PrimaryParents { node: ids[3], count: 2 }));
        assert!(report.to_string().contains("n3"));
    }

    #[test]
    fn reference_cycle_reported() {
        let mut g = SolutionGraph::new();
        let ids = chain(&mut g, 3);
        let mut snap = g.snapshot();
        // n3 -> n1 closes n1 -> n2 -> n3
        snap.edges.push(EdgeRecord {
            source: ids[3],
            target: ids[1],
            kind: EdgeKind::Reference,
            ref_kind: Some(RefKind::Hist),
        });
        snap.nodes[1].payload.provenance.push(ids[3]);
        let report = validate_structure(&SolutionGraph::from_snapshot(snap));
        assert!(report.violations.iter().any(|v| matches!(v, Violation::Cycle { .. })));
        assert!(report.violations.contains(&Violation::BackwardReference {
            source: ids[3],
            target: ids[1]
        }));
    }

    #[test]
    fn metric_and_branch_violations() {
        let mut g = SolutionGraph::new();
        let ids = chain(&mut g, 2);
        let mut snap = g.snapshot();
        snap.nodes[2].metric = Some(0.5);
        snap.nodes[2].branch_id = BranchId(99);
        let report = validate_structure(&SolutionGraph::from_snapshot(snap));
        assert!(report.violations.contains(&Violation::MetricState { node: ids[2] }));
        assert!(report.violations.contains(&Violation::BranchMismatch { node: ids[2] }));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut g = SolutionGraph::new();
        let ids = chain(&mut g, 3);
        g.set_clock(10);
        let x = g.add_child(ids[1], payload("x"), OperatorKind::Fusion).unwrap();
        g.add_reference_edges(&[ids[3]], x, RefKind::Hist).unwrap();
        g.set_outcome(x, ExecState::Evaluated, Some(0.125)).unwrap();
        let json = g.snapshot().to_json();
        let back = GraphSnapshot::from_json(&json).unwrap();
        assert_eq!(back, g.snapshot());
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let node = &value["nodes"][4];
        for key in [
            "node_id",
            "parent_id",
            "branch_id",
            "depth",
            "payload",
            "state",
            "metric",
            "stats",
            "created_step",
            "debug_count",
            "operator_used",
        ] {
            assert!(node.get(key).is_some(), "missing {key}");
        }
        assert_eq!(value["edges"][4]["ref_kind"], "Hist");
    }
}
