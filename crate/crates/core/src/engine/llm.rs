//! Chat-completion adapter. Speaks the common `/chat/completions` JSON
//! shape; the response must contain a plan followed by one fenced code
//! block, which becomes the artifact.

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{EngineError, ProposalEngine, ProposalRequest, TaskSpec};
use crate::graph::SolutionPayload;
use crate::operators::{OperatorKind, ReviewVerdict};

fn default_base_url() -> String {
    "http://localhost:8000/v1".into()
}
fn default_model() -> String {
    "default".into()
}
fn default_key_env() -> String {
    "MCGS_API_KEY".into()
}
fn default_temperature() -> f64 {
    0.5
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> u64 {
    300
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_model")]
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Set from the run's `temperature`.
    #[serde(skip, default = "default_temperature")]
    pub temperature: f64,
    /// Attempts per call before giving up on malformed or failed responses.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            base_url: default_base_url(),
            model: default_model(),
            api_key_env: default_key_env(),
            temperature: default_temperature(),
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
        }
    }
}

pub struct LlmEngine {
    cfg: LlmConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

const SYSTEM_PROMPT: &str = "You are an expert machine learning engineer. \
Answer with a short plan in prose, then exactly one fenced code block containing a \
complete, self-contained Python script. The script must print its validation score \
on a final line of the form `metric: <value>`.";

fn instruction(op: OperatorKind) -> &'static str {
    match op {
        OperatorKind::Draft => "Write a first complete solution for the task.",
        OperatorKind::Debug => "The target solution crashed. Fix the bug while keeping the approach.",
        OperatorKind::ImproveNormal => "Make one targeted improvement to the target solution.",
        OperatorKind::ImproveFE => "Improve the target solution through feature engineering or data processing.",
        OperatorKind::ImproveCS => {
            "Improve the target solution with a competition strategy (validation, TTA, ensembling, pseudo-labels)."
        }
        OperatorKind::Fusion => {
            "Combine the strongest ideas of the target and the reference solutions into one script."
        }
        OperatorKind::CodeReview => "Review the solution.",
        OperatorKind::Ensemble => "Ensemble the given solutions.",
    }
}

/// Splits a completion into (plan, first fenced block).
pub fn parse_completion(text: &str) -> Option<(String, String)> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```")?;
    let code = body[..end].trim_end().to_string();
    if code.trim().is_empty() {
        return None;
    }
    Some((text[..start].trim().to_string(), code))
}

fn parse_verdict(text: &str) -> Option<ReviewVerdict> {
    let line = text
        .lines()
        .find(|l| l.trim_start().to_uppercase().starts_with("VERDICT:"))?;
    let rest = line.trim_start()[8..].trim();
    let (word, reason) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    let reason = reason.trim_start_matches(['-', ':', ' ']).trim().to_string();
    match word.to_uppercase().as_str() {
        "PASS" => Some(ReviewVerdict::Pass),
        "WARN" => Some(ReviewVerdict::Warn(vec![reason])),
        "REJECT" => Some(ReviewVerdict::Reject(reason)),
        _ => None,
    }
}

impl LlmEngine {
    pub fn new(cfg: LlmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        LlmEngine { cfg, agent, api_key }
    }

    fn complete(&self, user: &str, seed: u64) -> Result<String, String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "seed": seed,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let value: Value = req
            .send_json(&body)
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| "response has no message content".to_string())
    }

    /// Calls the model until `parse` accepts the reply or retries run out.
    fn call_with_retries<T>(
        &self,
        prompt: &str,
        seed: u64,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, EngineError> {
        let mut last = String::new();
        for attempt in 0..self.cfg.max_retries.max(1) {
            match self.complete(prompt, seed.wrapping_add(attempt as u64)) {
                Ok(text) => match parse(&text) {
                    Some(v) => return Ok(v),
                    None => last = "malformed completion".into(),
                },
                Err(e) => last = e,
            }
        }
        Err(EngineError::Failure(format!(
            "{} attempts failed, last error: {last}",
            self.cfg.max_retries.max(1)
        )))
    }

    pub fn render_prompt(req: &ProposalRequest) -> String {
        let mut p = String::new();
        let _ = writeln!(
            p,
            "# Task\n{}\nMetric: {} ({:?})\n",
            req.task.description, req.task.metric_name, req.task.direction
        );
        let _ = writeln!(p, "# Instruction\n{}\n", instruction(req.operator));
        if req.operator != OperatorKind::Draft {
            let _ = writeln!(p, "# Target solution");
            if let Some(m) = req.target_metric {
                let _ = writeln!(p, "Score: {m}");
            }
            let _ = writeln!(
                p,
                "{}\n```python\n{}\n```\n",
                req.target_payload.plan, req.target_payload.artifact
            );
        }
        for r in &req.reference_payloads {
            let score = r.metric.map_or("none".to_string(), |m| m.to_string());
            let _ = writeln!(
                p,
                "# Reference {} ({:?}, score {score})\n{}\n```python\n{}\n```\n",
                r.node_id, r.state, r.payload.plan, r.payload.artifact
            );
        }
        for k in &req.kb_snippets {
            let _ = writeln!(p, "# Domain knowledge: {}\n{}\n", k.title, k.guidance);
        }
        p
    }
}

impl ProposalEngine for LlmEngine {
    fn propose(&self, req: &ProposalRequest) -> Result<SolutionPayload, EngineError> {
        if matches!(req.operator, OperatorKind::CodeReview | OperatorKind::Ensemble) {
            return Err(EngineError::Unsupported(req.operator));
        }
        let prompt = Self::render_prompt(req);
        let (plan, artifact) = self.call_with_retries(&prompt, req.seed, parse_completion)?;
        Ok(SolutionPayload {
            plan,
            artifact,
            analysis: format!("{} via {}", req.operator, self.cfg.model),
            provenance: Vec::new(),
        })
    }

    fn review(&self, candidate: &SolutionPayload, task: &TaskSpec) -> ReviewVerdict {
        let prompt = format!(
            "Review this solution for the task below. Check that it optimizes the metric `{}`, \
             that it cannot leak validation labels, and that it will run. Reply with one line \
             `VERDICT: PASS`, `VERDICT: WARN <reason>` or `VERDICT: REJECT <reason>`.\n\n\
             # Task\n{}\n\n# Plan\n{}\n\n```python\n{}\n```",
            task.metric_name, task.description, candidate.plan, candidate.artifact
        );
        self.call_with_retries(&prompt, 0, parse_verdict)
            .unwrap_or_else(|e| ReviewVerdict::Warn(vec![format!("review unavailable: {e}")]))
    }
}
