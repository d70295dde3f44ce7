use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::config::{ConfigError, EngineKind, RunConfig};
use super::coordinator::{Coordinator, CoordinatorError, Observer, SearchOutcome};
use super::events::write_jsonl;
use super::report::{emit_report, ReportError, RunManifest, Summary};
use crate::engine::{
    EngineError, Environment, LlmEngine, ProposalEngine, ScriptEnvironment, SyntheticEngine, SyntheticEnv,
    TaskLoadError, TaskSpec, TaskTables,
};
use crate::kb::{retrieve, KbError, KnowledgeBase};
use crate::seed::{derive_seed, Stream};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskLoadError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Search(#[from] CoordinatorError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub struct Backends {
    pub engine: Box<dyn ProposalEngine>,
    pub env: Box<dyn Environment>,
    /// Oracle data when the synthetic engine is used.
    pub tables: Option<Arc<TaskTables>>,
}

/// Loads the task and knowledge base named by the config, falling back to
/// the bundled ones. A configured noise level overrides the task's.
pub fn load_inputs(cfg: &RunConfig) -> Result<(TaskSpec, KnowledgeBase), RunError> {
    let mut task = match &cfg.task {
        Some(p) => TaskSpec::load(p)?,
        None => TaskSpec::default_synthetic(),
    };
    if let Some(sigma) = cfg.eval_noise_sigma {
        task.eval_noise_sigma = sigma;
    }
    let kb = match &cfg.kb {
        Some(p) => KnowledgeBase::load(p)?,
        None => KnowledgeBase::sample(),
    };
    Ok((task, kb))
}

pub fn build_backends(cfg: &RunConfig, task: &TaskSpec) -> Result<Backends, RunError> {
    match cfg.engine {
        EngineKind::Synthetic => {
            let tables = Arc::new(TaskTables::generate(task)?);
            let mut engine = SyntheticEngine::new(&tables);
            engine.kb_bias = cfg.kb_adopt_prob;
            engine.bug_prob = cfg.bug_prob;
            engine.mismatch_prob = cfg.metric_mismatch_prob;
            engine.fusion_mutation_prob = cfg.fusion_mutation_prob;
            let env = SyntheticEnv::new(tables.clone(), derive_seed(cfg.seed, 0, Stream::Noise));
            Ok(Backends {
                engine: Box::new(engine),
                env: Box::new(env),
                tables: Some(tables),
            })
        }
        EngineKind::Llm => {
            let mut llm = cfg.llm.clone();
            llm.temperature = cfg.temperature;
            Ok(Backends {
                engine: Box::new(LlmEngine::new(llm)),
                env: Box::new(ScriptEnvironment::new(
                    cfg.eval_command.clone(),
                    cfg.output_dir.join("work"),
                    Duration::from_secs(cfg.eval_timeout_secs),
                )),
                tables: None,
            })
        }
    }
}

/// Runs the search in memory. Knowledge is retrieved once for the task.
pub fn run_search(
    cfg: &RunConfig,
    task: &TaskSpec,
    kb: &KnowledgeBase,
    backends: &Backends,
    observer: Option<&mut Observer<'_>>,
) -> Result<SearchOutcome, RunError> {
    cfg.validate()?;
    let entries = if cfg.use_kb { retrieve(kb, task) } else { Vec::new() };
    let coordinator = Coordinator::new(cfg.clone(), task.clone(), entries, &*backends.engine, &*backends.env);
    Ok(coordinator.run(observer)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `events.jsonl`, `graph.json`, `run.json` and (synthetic runs)
/// `task_tables.json`, then the report files.
pub fn write_outputs(
    dir: &Path,
    cfg: &RunConfig,
    task: &TaskSpec,
    kb_version: &str,
    outcome: &SearchOutcome,
    tables: Option<&TaskTables>,
) -> Result<Summary, RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let events_path = dir.join("events.jsonl");
    let file = std::fs::File::create(&events_path).map_err(io_err(&events_path))?;
    write_jsonl(std::io::BufWriter::new(file), &outcome.events).map_err(io_err(&events_path))?;

    let graph_path = dir.join("graph.json");
    std::fs::write(&graph_path, outcome.graph.snapshot().to_json()).map_err(io_err(&graph_path))?;

    let manifest = RunManifest {
        config: cfg.clone(),
        task: task.clone(),
        kb_version: kb_version.to_owned(),
    };
    let manifest_path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;

    if let Some(t) = tables {
        let p = dir.join("task_tables.json");
        std::fs::write(&p, t.to_json()).map_err(io_err(&p))?;
    }
    Ok(emit_report(dir)?)
}

/// Loads inputs, searches, and writes every output file to
/// `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<Summary, RunError> {
    cfg.validate()?;
    let (task, kb) = load_inputs(cfg)?;
    let backends = build_backends(cfg, &task)?;
    let outcome = run_search(cfg, &task, &kb, &backends, None)?;
    write_outputs(
        &cfg.output_dir,
        cfg,
        &task,
        &kb.version,
        &outcome,
        backends.tables.as_deref(),
    )
}
