//! Run event log. One JSON object per line, ordered by `seq`; enough to
//! rebuild the final graph without re-running any engine.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::graph::{BranchId, ExecState, NodeId, RefKind, SolutionPayload};
use crate::operators::{ExpansionMode, OperatorKind, ReviewVerdict};
use crate::search::RewardRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub step: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Event {
    OperatorChosen {
        target: NodeId,
        parent: NodeId,
        operator: OperatorKind,
        /// `None` for the final ensemble.
        mode: Option<ExpansionMode>,
        references: Vec<NodeId>,
        kb_entries: Vec<String>,
        seed: u64,
    },
    AggregationSpawned {
        branches: Vec<BranchId>,
        references: Vec<NodeId>,
    },
    /// A buggy node hit the debug cap and was marked `Failed` instead of
    /// being expanded.
    BudgetExhausted {
        node: NodeId,
        debug_count: u32,
    },
    EngineFailure {
        target: NodeId,
        operator: OperatorKind,
        error: String,
    },
    NodeCreated {
        node_id: NodeId,
        parent_id: NodeId,
        branch_id: BranchId,
        depth: u32,
        operator: OperatorKind,
        mode: Option<ExpansionMode>,
        created_step: u64,
        debug_count: u32,
        payload: SolutionPayload,
        kb_entries: Vec<String>,
    },
    ReferenceEdges {
        target: NodeId,
        sources: Vec<NodeId>,
        ref_kind: RefKind,
    },
    ReviewVerdict {
        node_id: NodeId,
        verdict: ReviewVerdict,
    },
    Simulated {
        node_id: NodeId,
        status: ExecState,
        metric: Option<f64>,
        reward: RewardRecord,
        log: String,
    },
    Backprop {
        path: Vec<NodeId>,
        value: f64,
    },
    MemoryUpdate {
        node_id: NodeId,
        branch_id: BranchId,
        branch_tier: Vec<NodeId>,
        global_tier: Vec<NodeId>,
    },
    Finalized {
        best: Option<NodeId>,
        metric: Option<f64>,
        ensemble: Option<NodeId>,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::OperatorChosen { .. } => "OperatorChosen",
            Event::AggregationSpawned { .. } => "AggregationSpawned",
            Event::BudgetExhausted { .. } => "BudgetExhausted",
            Event::EngineFailure { .. } => "EngineFailure",
            Event::NodeCreated { .. } => "NodeCreated",
            Event::ReferenceEdges { .. } => "ReferenceEdges",
            Event::ReviewVerdict { .. } => "ReviewVerdict",
            Event::Simulated { .. } => "Simulated",
            Event::Backprop { .. } => "Backprop",
            Event::MemoryUpdate { .. } => "MemoryUpdate",
            Event::Finalized { .. } => "Finalized",
        }
    }
}

/// Appends events with consecutive sequence numbers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: u64, event: Event) {
        let seq = self.records.len() as u64;
        self.records.push(EventRecord { seq, step, event });
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EventRecord> {
        self.records
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }
}

pub fn to_jsonl(records: &[EventRecord]) -> String {
    let mut out = Vec::new();
    write_jsonl(&mut out, records).expect("writing to a Vec cannot fail");
    String::from_utf8(out).expect("serde_json emits UTF-8")
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[EventRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<EventRecord>, serde_json::Error> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
