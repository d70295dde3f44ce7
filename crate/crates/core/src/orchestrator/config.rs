use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Direction, LlmConfig};
use crate::operators::{ImproveWeights, ModeSwitches, OperatorBudgets, ReferenceCaps, SchedulerConfig};
use crate::search::{SearchPolicyConfig, DEFAULT_EPSILON};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    #[default]
    Synthetic,
    Llm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Reference edges enabled per the individual mode switches.
    #[default]
    Graph,
    /// Plain tree search: no reference edges and no final ensemble.
    Tree,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("parsing config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Run configuration. Every key is optional; omitted keys take the
/// defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub max_steps: u64,
    pub exploration_constant: f64,
    pub temperature: f64,
    pub max_parallel_workers: usize,
    pub max_draft_num: usize,
    pub max_debug_num: u32,
    pub branch_top_k: usize,
    pub global_top_k: usize,
    pub max_history_num: usize,
    pub max_ref_num: usize,
    pub max_agg_num: usize,
    pub ensemble_num: usize,
    pub kb_init_ref_prob: f64,

    pub seed: u64,
    pub engine: EngineKind,
    /// Task file; the bundled synthetic task when absent.
    pub task: Option<PathBuf>,
    /// Knowledge base file; the bundled sample when absent.
    pub kb: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: SearchMode,
    pub stagnation_window: usize,
    pub agg_min_trajectories: usize,
    pub agg_cooldown_steps: u64,
    /// Wall-clock seconds; the task's budget when absent.
    pub time_budget: Option<f64>,

    pub intra_branch: bool,
    pub cross_branch: bool,
    pub aggregation: bool,
    pub use_kb: bool,
    pub epsilon: f64,
    pub max_children: usize,
    pub improve_weights: ImproveWeights,
    /// Overrides the task's evaluation noise.
    pub eval_noise_sigma: Option<f64>,

    // synthetic engine
    pub kb_adopt_prob: f64,
    pub bug_prob: f64,
    pub metric_mismatch_prob: f64,
    pub fusion_mutation_prob: f64,

    // llm engine
    pub llm: LlmConfig,
    pub eval_command: Vec<String>,
    pub eval_timeout_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_steps: 500,
            exploration_constant: 1.414,
            temperature: 0.5,
            max_parallel_workers: 3,
            max_draft_num: 7,
            max_debug_num: 20,
            branch_top_k: 5,
            global_top_k: 10,
            max_history_num: 7,
            max_ref_num: 7,
            max_agg_num: 7,
            ensemble_num: 6,
            kb_init_ref_prob: 0.8,

            seed: 0,
            engine: EngineKind::Synthetic,
            task: None,
            kb: None,
            output_dir: PathBuf::from("runs/latest"),
            mode: SearchMode::Graph,
            stagnation_window: 5,
            agg_min_trajectories: 5,
            agg_cooldown_steps: 50,
            time_budget: None,

            intra_branch: true,
            cross_branch: true,
            aggregation: true,
            use_kb: true,
            epsilon: DEFAULT_EPSILON,
            max_children: 3,
            improve_weights: ImproveWeights::default(),
            eval_noise_sigma: None,

            kb_adopt_prob: 0.8,
            bug_prob: 0.1,
            metric_mismatch_prob: 0.0,
            fusion_mutation_prob: 0.1,

            llm: LlmConfig::default(),
            eval_command: vec!["python3".into()],
            eval_timeout_secs: 3600,
        }
    }
}

fn unit(name: &str, p: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be in [0, 1], got {p}")))
    }
}

impl RunConfig {
    /// Loads TOML, or JSON when the extension is `.json`. Relative task and
    /// knowledge base paths resolve against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = if is_json {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.task, &mut cfg.kb].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.max_parallel_workers == 0 {
            return invalid("max_parallel_workers must be at least 1");
        }
        if !(self.exploration_constant.is_finite() && self.exploration_constant > 0.0) {
            return invalid("exploration_constant must be finite and positive");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return invalid("epsilon must be positive");
        }
        if self.branch_top_k == 0 || self.global_top_k == 0 {
            return invalid("top-k sizes must be at least 1");
        }
        if self.max_children == 0 {
            return invalid("max_children must be at least 1");
        }
        if self.agg_min_trajectories == 0 {
            return invalid("agg_min_trajectories must be at least 1");
        }
        let w = self.improve_weights;
        if [w.normal, w.fe, w.cs].iter().any(|x| x.is_nan() || *x < 0.0) || w.normal + w.fe + w.cs <= 0.0 {
            return invalid("improve_weights must be non-negative with a positive sum");
        }
        if let Some(t) = self.time_budget {
            if t.is_nan() || t <= 0.0 {
                return invalid("time_budget must be positive");
            }
        }
        if let Some(s) = self.eval_noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return invalid("eval_noise_sigma must be >= 0");
            }
        }
        unit("kb_init_ref_prob", self.kb_init_ref_prob)?;
        unit("kb_adopt_prob", self.kb_adopt_prob)?;
        unit("bug_prob", self.bug_prob)?;
        unit("metric_mismatch_prob", self.metric_mismatch_prob)?;
        unit("fusion_mutation_prob", self.fusion_mutation_prob)?;
        if self.engine == EngineKind::Llm && self.eval_command.is_empty() {
            return invalid("eval_command must name a program");
        }
        Ok(())
    }

    pub fn modes(&self) -> ModeSwitches {
        match self.mode {
            SearchMode::Tree => ModeSwitches::TREE,
            SearchMode::Graph => ModeSwitches {
                intra_branch: self.intra_branch,
                cross_branch: self.cross_branch,
                aggregation: self.aggregation,
            },
        }
    }

    pub fn policy(&self) -> SearchPolicyConfig {
        SearchPolicyConfig {
            exploration_constant: self.exploration_constant,
            epsilon: self.epsilon,
            max_steps: self.max_steps,
        }
    }

    pub fn scheduler(&self, direction: Direction) -> SchedulerConfig {
        SchedulerConfig {
            budgets: OperatorBudgets {
                max_draft_num: self.max_draft_num,
                max_debug_num: self.max_debug_num,
                stagnation_window: self.stagnation_window,
                agg_min_trajectories: self.agg_min_trajectories,
                agg_cooldown_steps: self.agg_cooldown_steps,
            },
            caps: ReferenceCaps {
                max_history_num: self.max_history_num,
                max_ref_num: self.max_ref_num,
                max_agg_num: self.max_agg_num,
            },
            weights: self.improve_weights,
            modes: self.modes(),
            max_children: self.max_children,
            direction,
        }
    }

    /// The final ensemble runs only in graph mode; it reserves the last step.
    pub fn ensemble_enabled(&self) -> bool {
        self.mode == SearchMode::Graph && self.ensemble_num >= 2
    }
}
