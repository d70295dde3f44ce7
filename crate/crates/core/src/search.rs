//! Selection, reward, backpropagation and top-k memory.
//!
//! Selection and credit assignment only ever follow primary edges; reference
//! edges are invisible here.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Direction, TaskSpec};
use crate::graph::{BranchId, ExecState, NodeId, NodeStats, SolutionGraph, SolutionNode};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_EXPLORATION: f64 = 1.414;

pub const FAILURE_PENALTY: f64 = -1.0;
pub const REPAIR_BONUS: f64 = 0.5;
pub const REVIEW_PENALTY: f64 = -0.25;

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("no expandable node remains")]
    NoExpandableNode,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("evaluated node {0} has no metric")]
    MissingMetric(NodeId),
    #[error("node {0} has not been simulated")]
    NotSimulated(NodeId),
    #[error("no evaluated solution")]
    NoEvaluatedSolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPolicyConfig {
    pub exploration_constant: f64,
    pub epsilon: f64,
    pub max_steps: u64,
}

impl Default for SearchPolicyConfig {
    fn default() -> Self {
        SearchPolicyConfig {
            exploration_constant: DEFAULT_EXPLORATION,
            epsilon: DEFAULT_EPSILON,
            max_steps: 500,
        }
    }
}

/// `Q/(N+ε) + c·sqrt(ln(N_parent+1)/(N+ε))`, with `Q` the summed reward.
pub fn uct_score(child: &NodeStats, parent_visits: u64, cfg: &SearchPolicyConfig) -> f64 {
    let n = child.visits as f64 + cfg.epsilon;
    let exploit = child.value / n;
    let explore = cfg.exploration_constant * (((parent_visits as f64) + 1.0).ln() / n).sqrt();
    exploit + explore
}

/// Temporary visits along the paths of in-flight jobs. They steer
/// concurrent selections apart and never touch [`NodeStats`].
#[derive(Clone, Debug, Default)]
pub struct VirtualVisits {
    counts: BTreeMap<NodeId, u64>,
}

impl VirtualVisits {
    pub fn get(&self, id: NodeId) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn add_path(&mut self, path: &[NodeId]) {
        for &id in path {
            *self.counts.entry(id).or_default() += 1;
        }
    }

    pub fn remove_path(&mut self, path: &[NodeId]) {
        for id in path {
            if let Some(c) = self.counts.get_mut(id) {
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(id);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Descends from the root along primary edges, taking the argmax-UCT child
/// (lowest id on ties) until a node accepted by `expandable` is reached.
/// Children whose subtree contains no expandable node are skipped.
pub fn select<F>(
    graph: &SolutionGraph,
    cfg: &SearchPolicyConfig,
    expandable: F,
    virtual_visits: &VirtualVisits,
) -> Result<NodeId, SearchError>
where
    F: Fn(&SolutionNode) -> bool,
{
    // children always have larger ids than their parent
    let n = graph.len();
    let mut can_expand = vec![false; n];
    let mut viable = vec![false; n];
    for node in graph.nodes().iter().rev() {
        let i = node.node_id.index();
        can_expand[i] = expandable(node);
        viable[i] = can_expand[i] || graph.children(node.node_id).iter().any(|c| viable[c.index()]);
    }
    if !viable[0] {
        return Err(SearchError::NoExpandableNode);
    }

    let mut cur = NodeId::ROOT;
    loop {
        if can_expand[cur.index()] {
            return Ok(cur);
        }
        let parent = graph.node(cur).ok_or(SearchError::UnknownNode(cur))?;
        let parent_visits = parent.stats.visits + virtual_visits.get(cur);
        let mut best: Option<(NodeId, f64)> = None;
        for &child in graph.children(cur) {
            if !viable[child.index()] {
                continue;
            }
            let node = &graph.nodes()[child.index()];
            let stats = NodeStats {
                visits: node.stats.visits + virtual_visits.get(child),
                value: node.stats.value,
            };
            let score = uct_score(&stats, parent_visits, cfg);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((child, score));
            }
        }
        cur = best.ok_or(SearchError::NoExpandableNode)?.0;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub improvement: f64,
    pub debug_bonus: f64,
    pub penalty: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub value: f64,
    pub components: RewardComponents,
}

impl RewardRecord {
    pub fn from_components(components: RewardComponents) -> Self {
        let sum = components.improvement + components.debug_bonus + components.penalty;
        RewardRecord {
            value: sum.clamp(-1.0, 1.0),
            components,
        }
    }
}

/// Reward of `child` relative to its primary parent. `review_warned` adds the
/// review penalty.
pub fn compute_reward(
    parent: &SolutionNode,
    child: &SolutionNode,
    task: &TaskSpec,
    review_warned: bool,
) -> Result<RewardRecord, SearchError> {
    let mut c = RewardComponents::default();
    match child.state {
        ExecState::Buggy | ExecState::Failed => c.penalty = FAILURE_PENALTY,
        ExecState::Evaluated => {
            let m = child.metric.ok_or(SearchError::MissingMetric(child.node_id))?;
            match (parent.state, parent.metric) {
                (ExecState::Evaluated, Some(mp)) => {
                    let rel = task.direction.sign() * (m - mp) / mp.abs().max(1e-8);
                    c.improvement = rel.clamp(-1.0, 1.0);
                }
                _ => c.debug_bonus = REPAIR_BONUS,
            }
        }
        ExecState::Root | ExecState::Drafted => return Err(SearchError::NotSimulated(child.node_id)),
    }
    if review_warned {
        c.penalty += REVIEW_PENALTY;
    }
    Ok(RewardRecord::from_components(c))
}

/// Adds one visit and `reward.value` to every node on the primary path from
/// `leaf` to the root. Returns that path, leaf first.
pub fn backpropagate(
    graph: &mut SolutionGraph,
    leaf: NodeId,
    reward: &RewardRecord,
) -> Result<Vec<NodeId>, SearchError> {
    let path = graph.path_to_root(leaf).ok_or(SearchError::UnknownNode(leaf))?;
    for &id in &path {
        let stats = graph.stats_mut(id).expect("path nodes exist");
        stats.visits += 1;
        stats.value += reward.value;
    }
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierEntry {
    pub node_id: NodeId,
    pub metric: f64,
    pub created_step: u64,
}

/// Best-first order: better metric, then earlier creation.
pub fn rank_entries(direction: Direction, a: &TierEntry, b: &TierEntry) -> Ordering {
    direction
        .rank(a.metric, b.metric)
        .then(a.created_step.cmp(&b.created_step))
        .then(a.node_id.cmp(&b.node_id))
}

/// Per-branch and global top-k of evaluated nodes. Per-node records live in
/// the graph itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryTiers {
    pub branch_top_k: usize,
    pub global_top_k: usize,
    pub direction: Direction,
    per_branch: BTreeMap<BranchId, Vec<TierEntry>>,
    global: Vec<TierEntry>,
}

impl MemoryTiers {
    pub fn new(branch_top_k: usize, global_top_k: usize, direction: Direction) -> Self {
        MemoryTiers {
            branch_top_k,
            global_top_k,
            direction,
            per_branch: BTreeMap::new(),
            global: Vec::new(),
        }
    }

    /// Inserts an evaluated node into its branch tier and the global tier.
    /// Non-evaluated nodes are ignored.
    pub fn update(&mut self, node: &SolutionNode) {
        let (ExecState::Evaluated, Some(metric)) = (node.state, node.metric) else {
            return;
        };
        let entry = TierEntry {
            node_id: node.node_id,
            metric,
            created_step: node.created_step,
        };
        let dir = self.direction;
        let branch = self.per_branch.entry(node.branch_id).or_default();
        insert_top_k(branch, entry, self.branch_top_k, dir);
        insert_top_k(&mut self.global, entry, self.global_top_k, dir);
    }

    pub fn branch(&self, branch: BranchId) -> &[TierEntry] {
        self.per_branch.get(&branch).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn branches(&self) -> impl Iterator<Item = (BranchId, &[TierEntry])> {
        self.per_branch.iter().map(|(b, v)| (*b, v.as_slice()))
    }

    pub fn global(&self) -> &[TierEntry] {
        &self.global
    }

    pub fn best(&self) -> Option<&TierEntry> {
        self.global.first()
    }
}

fn insert_top_k(tier: &mut Vec<TierEntry>, entry: TierEntry, k: usize, dir: Direction) {
    if tier.iter().any(|e| e.node_id == entry.node_id) {
        return;
    }
    let pos = tier
        .binary_search_by(|probe| rank_entries(dir, probe, &entry))
        .unwrap_or_else(|p| p);
    tier.insert(pos, entry);
    tier.truncate(k);
}

pub fn update_memory(memory: &mut MemoryTiers, node: &SolutionNode, task: &TaskSpec) {
    debug_assert_eq!(memory.direction, task.direction);
    memory.update(node);
}

pub fn best_solution(memory: &MemoryTiers, task: &TaskSpec) -> Result<NodeId, SearchError> {
    debug_assert_eq!(memory.direction, task.direction);
    memory.best().map(|e| e.node_id).ok_or(SearchError::NoEvaluatedSolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SolutionPayload;
    use crate::operators::OperatorKind;

    fn stats(value: f64, visits: u64) -> NodeStats {
        NodeStats { visits, value }
    }

    fn task(direction: Direction) -> TaskSpec {
        TaskSpec {
            direction,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn uct_matches_hand_value() {
        let cfg = SearchPolicyConfig::default();
        let s = uct_score(&stats(2.0, 4), 10, &cfg);
        // 2/4.000001 + 1.414*sqrt(ln 11 / 4.000001), evaluated with mpmath at 50 digits
        assert!((s - 1.594_799_059_584_436_7).abs() < 1e-12, "{s}");
    }

    #[test]
    fn unvisited_child_dominates() {
        let cfg = SearchPolicyConfig::default();
        let fresh = uct_score(&stats(0.0, 0), 1, &cfg);
        let strong = uct_score(&stats(1000.0, 1000), 1_000_000, &cfg);
        assert!(fresh > strong);
    }

    fn graph_with_children(children: &[(f64, u64)], root_visits: u64) -> (SolutionGraph, Vec<NodeId>) {
        let mut g = SolutionGraph::new();
        let mut ids = Vec::new();
        for &(q, n) in children {
            let id = g
                .add_child(NodeId::ROOT, SolutionPayload::default(), OperatorKind::Draft)
                .unwrap();
            g.set_outcome(id, ExecState::Evaluated, Some(0.5)).unwrap();
            *g.stats_mut(id).unwrap() = stats(q, n);
            ids.push(id);
        }
        g.stats_mut(NodeId::ROOT).unwrap().visits = root_visits;
        (g, ids)
    }

    #[test]
    fn select_prefers_unvisited() {
        let (g, ids) = graph_with_children(&[(1.0, 2), (0.0, 0)], 2);
        let cfg = SearchPolicyConfig::default();
        let pick = select(&g, &cfg, |n| !n.is_root(), &VirtualVisits::default()).unwrap();
        assert_eq!(pick, ids[1]);
    }

    #[test]
    fn select_prefers_exploitation_at_equal_visits() {
        let (g, ids) = graph_with_children(&[(3.0, 4), (1.0, 4)], 8);
        let cfg = SearchPolicyConfig::default();
        let pick = select(&g, &cfg, |n| !n.is_root(), &VirtualVisits::default()).unwrap();
        assert_eq!(pick, ids[0]);
    }

    #[test]
    fn select_tie_breaks_low_id_and_skips_dead_subtrees() {
        let (g, ids) = graph_with_children(&[(1.0, 2), (1.0, 2), (5.0, 2)], 6);
        let cfg = SearchPolicyConfig::default();
        let pick = select(
            &g,
            &cfg,
            |n| n.node_id != ids[2] && !n.is_root(),
            &VirtualVisits::default(),
        )
        .unwrap();
        assert_eq!(pick, ids[0]);
        assert_eq!(
            select(&g, &cfg, |_| false, &VirtualVisits::default()),
            Err(SearchError::NoExpandableNode)
        );
    }

    #[test]
    fn virtual_visits_divert_selection() {
        let (g, ids) = graph_with_children(&[(1.0, 2), (1.0, 2)], 4);
        let cfg = SearchPolicyConfig::default();
        let mut vv = VirtualVisits::default();
        vv.add_path(&[ids[0], NodeId::ROOT]);
        assert_eq!(select(&g, &cfg, |n| !n.is_root(), &vv).unwrap(), ids[1]);
        vv.remove_path(&[ids[0], NodeId::ROOT]);
        assert!(vv.is_empty());
    }

    fn node(state: ExecState, metric: Option<f64>) -> SolutionNode {
        let mut g = SolutionGraph::new();
        let id = g
            .add_child(NodeId::ROOT, SolutionPayload::default(), OperatorKind::Draft)
            .unwrap();
        g.set_outcome(id, state, metric).unwrap();
        g.node(id).unwrap().clone()
    }

    #[test]
    fn reward_cases() {
        let t = task(Direction::Maximize);
        let failed = node(ExecState::Failed, None);
        let buggy = node(ExecState::Buggy, None);
        let good = node(ExecState::Evaluated, Some(0.88));
        let parent = node(ExecState::Evaluated, Some(0.80));

        assert_eq!(compute_reward(&parent, &failed, &t, false).unwrap().value, -1.0);
        assert_eq!(compute_reward(&buggy, &good, &t, false).unwrap().value, 0.5);
        let r = compute_reward(&parent, &good, &t, false).unwrap();
        assert!((r.components.improvement - 0.1).abs() < 1e-12);
        assert!((r.value - 0.1).abs() < 1e-12);
        let warned = compute_reward(&parent, &good, &t, true).unwrap();
        assert!((warned.value - (0.1 - 0.25)).abs() < 1e-12);
        assert_eq!(compute_reward(&parent, &failed, &t, true).unwrap().value, -1.0);

        let min = task(Direction::Minimize);
        let r = compute_reward(&parent, &good, &min, false).unwrap();
        assert!((r.value + 0.1).abs() < 1e-12);

        let mut broken = good.clone();
        broken.metric = None;
        assert_eq!(
            compute_reward(&parent, &broken, &t, false),
            Err(SearchError::MissingMetric(broken.node_id))
        );
    }

    #[test]
    fn improvement_is_clamped() {
        let t = task(Direction::Maximize);
        let parent = node(ExecState::Evaluated, Some(0.0));
        let child = node(ExecState::Evaluated, Some(3.0));
        assert_eq!(compute_reward(&parent, &child, &t, false).unwrap().value, 1.0);
    }

    #[test]
    fn backprop_updates_path_only() {
        let mut g = SolutionGraph::new();
        let a = g
            .add_child(NodeId::ROOT, SolutionPayload::default(), OperatorKind::Draft)
            .unwrap();
        let other = g
            .add_child(NodeId::ROOT, SolutionPayload::default(), OperatorKind::Draft)
            .unwrap();
        g.set_clock(1);
        let leaf = g
            .add_child(a, SolutionPayload::default(), OperatorKind::ImproveNormal)
            .unwrap();
        *g.stats_mut(NodeId::ROOT).unwrap() = stats(1.0, 5);
        *g.stats_mut(a).unwrap() = stats(0.3, 2);
        *g.stats_mut(other).unwrap() = stats(0.7, 3);
        let reward = RewardRecord::from_components(RewardComponents {
            improvement: 0.5,
            ..Default::default()
        });
        let path = backpropagate(&mut g, leaf, &reward).unwrap();
        assert_eq!(path, vec![leaf, a, NodeId::ROOT]);
        assert_eq!(g.root().stats, stats(1.5, 6));
        assert_eq!(g.node(a).unwrap().stats.visits, 3);
        assert!((g.node(a).unwrap().stats.value - 0.8).abs() < 1e-12);
        assert_eq!(g.node(leaf).unwrap().stats, stats(0.5, 1));
        assert_eq!(g.node(other).unwrap().stats, stats(0.7, 3));
        assert_eq!(
            backpropagate(&mut g, NodeId(77), &reward),
            Err(SearchError::UnknownNode(NodeId(77)))
        );
    }

    fn evaluated_graph(metrics: &[f64], same_branch: bool) -> SolutionGraph {
        let mut g = SolutionGraph::new();
        let mut parent = NodeId::ROOT;
        for (i, &m) in metrics.iter().enumerate() {
            g.set_clock(i as u64 + 1);
            let id = g
                .add_child(parent, SolutionPayload::default(), OperatorKind::Draft)
                .unwrap();
            g.set_outcome(id, ExecState::Evaluated, Some(m)).unwrap();
            if same_branch {
                parent = id;
            }
        }
        g
    }

    #[test]
    fn branch_tier_keeps_top_k() {
        let g = evaluated_graph(&[0.7, 0.9, 0.8], true);
        let mut mem = MemoryTiers::new(2, 10, Direction::Maximize);
        for n in &g.nodes()[1..] {
            mem.update(n);
        }
        let tier: Vec<f64> = mem.branch(BranchId(1)).iter().map(|e| e.metric).collect();
        assert_eq!(tier, vec![0.9, 0.8]);
    }

    #[test]
    fn minimize_ranks_low_first() {
        let g = evaluated_graph(&[0.30, 0.25], false);
        let mut mem = MemoryTiers::new(5, 10, Direction::Minimize);
        for n in &g.nodes()[1..] {
            mem.update(n);
        }
        let t = task(Direction::Minimize);
        assert_eq!(best_solution(&mem, &t).unwrap(), NodeId(2));
    }

    #[test]
    fn best_solution_cases() {
        let t = task(Direction::Maximize);
        let mem = MemoryTiers::new(5, 10, Direction::Maximize);
        assert_eq!(best_solution(&mem, &t), Err(SearchError::NoEvaluatedSolution));

        let g = evaluated_graph(&[0.88, 0.91, 0.85], false);
        let mut mem = MemoryTiers::new(5, 10, Direction::Maximize);
        for n in &g.nodes()[1..] {
            update_memory(&mut mem, n, &t);
        }
        assert_eq!(best_solution(&mem, &t).unwrap(), NodeId(2));

        let g = evaluated_graph(&[0.5], false);
        let mut mem = MemoryTiers::new(5, 10, Direction::Maximize);
        mem.update(&g.nodes()[1]);
        assert_eq!(best_solution(&mem, &t).unwrap(), NodeId(1));

        let g = evaluated_graph(&[0.6, 0.6], false);
        let mut mem = MemoryTiers::new(5, 10, Direction::Maximize);
        mem.update(&g.nodes()[2]);
        mem.update(&g.nodes()[1]);
        assert_eq!(best_solution(&mem, &t).unwrap(), NodeId(1));
    }
}
