//! Rebuilds a graph from its event log alone.

use thiserror::Error;

use super::events::{Event, EventRecord};
use crate::graph::{ExecState, GraphError, NodeId, SolutionGraph};

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("event {seq}: {source}")]
    Graph {
        seq: u64,
        #[source]
        source: GraphError,
    },
    #[error("event {seq}: log names node {logged} but replay assigned {assigned}")]
    IdMismatch { seq: u64, logged: NodeId, assigned: NodeId },
    #[error("event {seq}: unknown node {node}")]
    UnknownNode { seq: u64, node: NodeId },
}

pub fn replay(events: &[EventRecord]) -> Result<SolutionGraph, ReplayError> {
    let mut g = SolutionGraph::new();
    for rec in events {
        let seq = rec.seq;
        let graph_err = |source| ReplayError::Graph { seq, source };
        match &rec.event {
            Event::NodeCreated {
                node_id,
                parent_id,
                operator,
                created_step,
                payload,
                ..
            } => {
                g.set_clock(*created_step);
                let id = g.add_child(*parent_id, payload.clone(), *operator).map_err(graph_err)?;
                if id != *node_id {
                    return Err(ReplayError::IdMismatch {
                        seq,
                        logged: *node_id,
                        assigned: id,
                    });
                }
            }
            Event::ReferenceEdges {
                target,
                sources,
                ref_kind,
            } => {
                g.add_reference_edges(sources, *target, *ref_kind).map_err(graph_err)?;
            }
            Event::Simulated {
                node_id,
                status,
                metric,
                ..
            } => {
                g.set_outcome(*node_id, *status, *metric).map_err(graph_err)?;
            }
            Event::BudgetExhausted { node, .. } => {
                g.set_outcome(*node, ExecState::Failed, None).map_err(graph_err)?;
            }
            Event::Backprop { path, value } => {
                for &id in path {
                    let stats = g.stats_mut(id).ok_or(ReplayError::UnknownNode { seq, node: id })?;
                    stats.visits += 1;
                    stats.value += value;
                }
            }
            Event::Finalized { .. } => g.finalize(),
            Event::OperatorChosen { .. }
            | Event::AggregationSpawned { .. }
            | Event::EngineFailure { .. }
            | Event::ReviewVerdict { .. }
            | Event::MemoryUpdate { .. } => {}
        }
    }
    Ok(g)
}
