//! Proposal engines (candidate generation) and environments (evaluation).
//!
//! The search core only talks to the [`ProposalEngine`] and [`Environment`]
//! traits. Two implementations ship: a deterministic synthetic task used for
//! all offline verification, and an HTTP chat-completion adapter paired with
//! a subprocess evaluator.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ExecState, NodeId, SolutionPayload};
use crate::kb::KnowledgeEntry;
use crate::operators::{OperatorKind, ReviewVerdict};

pub mod llm;
pub mod script;
pub mod synthetic;

pub use llm::{LlmConfig, LlmEngine};
pub use script::ScriptEnvironment;
pub use synthetic::{CoordRole, SyntheticDesign, SyntheticEngine, SyntheticEnv, SyntheticParams, TaskTables};

const DEFAULT_TASK: &str = include_str!("../../data/default_task.json");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    Maximize,
    Minimize,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }

    /// `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        self.rank(a, b) == Ordering::Less
    }

    /// Best-first ordering of two metrics.
    pub fn rank(self, a: f64, b: f64) -> Ordering {
        match self {
            Direction::Maximize => b.total_cmp(&a),
            Direction::Minimize => a.total_cmp(&b),
        }
    }
}

fn default_time_budget() -> f64 {
    12.0 * 3600.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub description: String,
    pub metric_name: String,
    pub direction: Direction,
    #[serde(default)]
    pub eval_noise_sigma: f64,
    /// Wall-clock budget in seconds.
    #[serde(default = "default_time_budget")]
    pub time_budget: f64,
    /// Landscape parameters for the synthetic environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticParams>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            task_id: "task".into(),
            description: String::new(),
            metric_name: "score".into(),
            direction: Direction::Maximize,
            eval_noise_sigma: 0.0,
            time_budget: default_time_budget(),
            synthetic: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TaskLoadError {
    #[error("reading task {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing task: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid task: {0}")]
    Invalid(String),
}

impl TaskSpec {
    /// The bundled synthetic image-classification task.
    pub fn default_synthetic() -> Self {
        Self::from_json(DEFAULT_TASK).expect("bundled task is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaskLoadError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaskLoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, TaskLoadError> {
        let task: TaskSpec = serde_json::from_str(text)?;
        if task.eval_noise_sigma < 0.0 || !task.eval_noise_sigma.is_finite() {
            return Err(TaskLoadError::Invalid("eval_noise_sigma must be >= 0".into()));
        }
        if let Some(p) = &task.synthetic {
            p.validate().map_err(TaskLoadError::Invalid)?;
        }
        Ok(task)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePayload {
    pub node_id: NodeId,
    pub payload: SolutionPayload,
    pub metric: Option<f64>,
    pub state: ExecState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRequest {
    pub operator: OperatorKind,
    pub target_payload: SolutionPayload,
    pub target_metric: Option<f64>,
    /// Same order as the reference set.
    pub reference_payloads: Vec<ReferencePayload>,
    pub task: TaskSpec,
    pub kb_snippets: Vec<KnowledgeEntry>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub status: ExecState,
    pub metric: Option<f64>,
    pub log: String,
}

impl EvalOutcome {
    pub fn evaluated(metric: f64, log: impl Into<String>) -> Self {
        EvalOutcome {
            status: ExecState::Evaluated,
            metric: Some(metric),
            log: log.into(),
        }
    }

    pub fn failed(status: ExecState, log: impl Into<String>) -> Self {
        debug_assert!(status != ExecState::Evaluated);
        EvalOutcome {
            status,
            metric: None,
            log: log.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember {
    pub payload: SolutionPayload,
    pub metric: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("engine failure: {0}")]
    Failure(String),
    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("operator {0} is not handled by this engine")]
    Unsupported(OperatorKind),
    #[error("worker panicked: {0}")]
    WorkerPanic(String),
}

/// Candidate generation `g_o(v, R)` plus the review pass applied to every
/// candidate before it is simulated.
pub trait ProposalEngine: Send + Sync {
    fn propose(&self, req: &ProposalRequest) -> Result<SolutionPayload, EngineError>;

    fn review(&self, candidate: &SolutionPayload, task: &TaskSpec) -> ReviewVerdict;
}

/// Evaluation `h(T, s)` and final ensembling.
pub trait Environment: Send + Sync {
    fn evaluate(&self, payload: &SolutionPayload, task: &TaskSpec) -> EvalOutcome;

    fn ensemble_combine(&self, members: &[EnsembleMember], task: &TaskSpec) -> Result<SolutionPayload, EngineError>;
}
