//! Report files derived from a run directory: the best-so-far curve and a
//! summary with usage histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::RunConfig;
use super::events::{read_jsonl, Event, EventRecord};
use super::replay::{replay, ReplayError};
use crate::engine::{Direction, TaskSpec, TaskTables};
use crate::graph::{ExecState, NodeId, SolutionGraph};
use crate::operators::{ExpansionMode, OperatorKind};

pub const NO_SOLUTION_MARKER: &str = "no evaluated solutions";

/// `run.json`: what was run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub task: TaskSpec,
    pub kb_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task_id: String,
    pub metric_name: String,
    pub direction: Direction,
    pub seed: u64,
    /// `"ok"`, or [`NO_SOLUTION_MARKER`] when nothing evaluated.
    pub status: String,
    pub best_node: Option<NodeId>,
    pub best_metric: Option<f64>,
    pub ensemble_node: Option<NodeId>,
    pub steps_used: u64,
    pub simulated: usize,
    pub nodes_by_state: BTreeMap<String, usize>,
    pub operator_usage: BTreeMap<String, usize>,
    pub mode_usage: BTreeMap<String, usize>,
    pub budget_exhausted: usize,
    pub engine_failures: usize,
    pub reference_edges: usize,
    pub kb_version: String,
    /// Known optimum of a synthetic task.
    pub optimum_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub node_id: NodeId,
    pub status: ExecState,
    pub metric: Option<f64>,
    pub best_so_far: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing event log {0}")]
    MissingLog(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

/// One row per simulation in log order, with the running best metric.
pub fn best_so_far(events: &[EventRecord], direction: Direction) -> Vec<CurveRow> {
    let mut best: Option<f64> = None;
    let mut rows = Vec::new();
    for rec in events {
        if let Event::Simulated {
            node_id,
            status,
            metric,
            ..
        } = &rec.event
        {
            if let (ExecState::Evaluated, Some(m)) = (status, metric) {
                if best.is_none_or(|b| direction.better(*m, b)) {
                    best = Some(*m);
                }
            }
            rows.push(CurveRow {
                step: rec.step,
                node_id: *node_id,
                status: *status,
                metric: *metric,
                best_so_far: best,
            });
        }
    }
    rows
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let fmt = |m: Option<f64>| m.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("step,node_id,status,metric,best_so_far\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{},{}",
            r.step,
            r.node_id.0,
            r.status,
            fmt(r.metric),
            fmt(r.best_so_far)
        );
    }
    out
}

pub fn summarize(manifest: &RunManifest, events: &[EventRecord], graph: &SolutionGraph) -> Summary {
    let mut operator_usage: BTreeMap<String, usize> = OperatorKind::ALL.iter().map(|o| (o.to_string(), 0)).collect();
    let mut mode_usage: BTreeMap<String, usize> = [
        ExpansionMode::PrimaryOnly,
        ExpansionMode::IntraBranch,
        ExpansionMode::CrossBranch,
        ExpansionMode::MultiBranchAgg,
    ]
    .iter()
    .map(|m| (m.to_string(), 0))
    .collect();
    let (mut simulated, mut budget_exhausted, mut engine_failures) = (0, 0, 0);
    let mut finalized = None;
    let mut steps_used = 0;
    for rec in events {
        steps_used = steps_used.max(rec.step);
        match &rec.event {
            Event::NodeCreated { operator, mode, .. } => {
                *operator_usage.entry(operator.to_string()).or_default() += 1;
                if let Some(m) = mode {
                    *mode_usage.entry(m.to_string()).or_default() += 1;
                }
            }
            Event::Simulated { .. } => simulated += 1,
            Event::BudgetExhausted { .. } => budget_exhausted += 1,
            Event::EngineFailure { .. } => engine_failures += 1,
            Event::Finalized { best, metric, ensemble } => finalized = Some((*best, *metric, *ensemble)),
            _ => {}
        }
    }
    let direction = manifest.task.direction;
    let (best_node, best_metric, ensemble_node) = finalized.unwrap_or_else(|| {
        // unfinished log: fall back to the best evaluated node
        let best = graph
            .nodes()
            .iter()
            .filter(|n| n.state == ExecState::Evaluated)
            .filter_map(|n| n.metric.map(|m| (n.node_id, m)))
            .reduce(|a, b| if direction.better(b.1, a.1) { b } else { a });
        (best.map(|b| b.0), best.map(|b| b.1), None)
    });
    let mut nodes_by_state: BTreeMap<String, usize> = [
        ExecState::Root,
        ExecState::Drafted,
        ExecState::Buggy,
        ExecState::Evaluated,
        ExecState::Failed,
    ]
    .iter()
    .map(|s| (format!("{s:?}"), 0))
    .collect();
    for n in graph.nodes() {
        *nodes_by_state.entry(format!("{:?}", n.state)).or_default() += 1;
    }
    Summary {
        task_id: manifest.task.task_id.clone(),
        metric_name: manifest.task.metric_name.clone(),
        direction,
        seed: manifest.config.seed,
        status: if best_node.is_some() {
            "ok".into()
        } else {
            NO_SOLUTION_MARKER.into()
        },
        best_node,
        best_metric,
        ensemble_node,
        steps_used,
        simulated,
        nodes_by_state,
        operator_usage,
        mode_usage,
        budget_exhausted,
        engine_failures,
        reference_edges: graph.edges().iter().filter(|e| e.ref_kind.is_some()).count(),
        kb_version: manifest.kb_version.clone(),
        optimum_metric: None,
    }
}

fn read(path: &Path) -> Result<String, ReportError> {
    std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_owned(),
        source,
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ReportError> {
    serde_json::from_str(text).map_err(|source| ReportError::Parse {
        path: path.to_owned(),
        source,
    })
}

pub fn load_events(run_dir: &Path) -> Result<Vec<EventRecord>, ReportError> {
    let path = run_dir.join("events.jsonl");
    if !path.exists() {
        return Err(ReportError::MissingLog(path));
    }
    let text = read(&path)?;
    read_jsonl(text.as_bytes()).map_err(|source| ReportError::Parse { path, source })
}

/// Writes `report.csv` and `summary.json` from `events.jsonl` and
/// `run.json` in `run_dir`.
pub fn emit_report(run_dir: impl AsRef<Path>) -> Result<Summary, ReportError> {
    let dir = run_dir.as_ref();
    let events = load_events(dir)?;
    let manifest_path = dir.join("run.json");
    let manifest: RunManifest = parse(&manifest_path, &read(&manifest_path)?)?;
    let graph = replay(&events)?;

    let rows = best_so_far(&events, manifest.task.direction);
    write(&dir.join("report.csv"), &curve_csv(&rows))?;

    let mut summary = summarize(&manifest, &events, &graph);
    let tables_path = dir.join("task_tables.json");
    if tables_path.exists() {
        let tables: TaskTables = parse(&tables_path, &read(&tables_path)?)?;
        summary.optimum_metric = Some(tables.optimum_metric);
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join("summary.json"), &text)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::{RewardComponents, RewardRecord};

    fn simulated(step: u64, id: u64, metric: Option<f64>) -> EventRecord {
        EventRecord {
            seq: step,
            step,
            event: Event::Simulated {
                node_id: NodeId(id),
                status: if metric.is_some() {
                    ExecState::Evaluated
                } else {
                    ExecState::Buggy
                },
                metric,
                reward: RewardRecord::from_components(RewardComponents::default()),
                log: String::new(),
            },
        }
    }

    #[test]
    fn running_best_per_direction() {
        let events: Vec<EventRecord> = [Some(0.5), Some(0.7), None, Some(0.65), Some(0.8)]
            .iter()
            .enumerate()
            .map(|(i, m)| simulated(i as u64 + 1, i as u64 + 1, *m))
            .collect();
        let best: Vec<Option<f64>> = best_so_far(&events, Direction::Maximize)
            .iter()
            .map(|r| r.best_so_far)
            .collect();
        assert_eq!(best, vec![Some(0.5), Some(0.7), Some(0.7), Some(0.7), Some(0.8)]);
        let best: Vec<Option<f64>> = best_so_far(&events, Direction::Minimize)
            .iter()
            .map(|r| r.best_so_far)
            .collect();
        assert_eq!(best, vec![Some(0.5); 5]);
        let csv = curve_csv(&best_so_far(&events, Direction::Maximize));
        assert_eq!(csv.lines().nth(3).unwrap(), "3,3,Buggy,,0.7");
    }

    #[test]
    fn empty_log_reports_marker() {
        let manifest = RunManifest {
            config: RunConfig::default(),
            task: TaskSpec::default(),
            kb_version: "v".into(),
        };
        let s = summarize(&manifest, &[], &SolutionGraph::new());
        assert_eq!(s.status, NO_SOLUTION_MARKER);
        assert_eq!(s.best_node, None);
        assert_eq!(s.mode_usage["CrossBranch"], 0);
    }

    #[test]
    fn missing_log_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(dir.path()), Err(ReportError::MissingLog(_))));
    }
}
