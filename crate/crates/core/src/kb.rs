//! Domain knowledge base: keyword retrieval against the task description
//! and operator-level routing of retrieved entries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::TaskSpec;
use crate::operators::OperatorKind;

const SAMPLE_KB: &str = include_str!("../data/sample_kb.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KnowledgeLevel {
    Model,
    Data,
    Strategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entry_id: String,
    pub level: KnowledgeLevel,
    pub keywords: Vec<String>,
    pub title: String,
    pub guidance: String,
    /// Machine-readable hint; the synthetic engine reads it as
    /// coordinate -> recommended value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendation: Option<BTreeMap<usize, i64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub version: String,
    pub entries: Vec<KnowledgeEntry>,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("reading knowledge base {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing knowledge base: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("entry {0} has no keywords")]
    NoKeywords(String),
    #[error("duplicate entry id {0}")]
    DuplicateId(String),
}

impl KnowledgeBase {
    /// The bundled sample entries.
    pub fn sample() -> Self {
        Self::from_json(SAMPLE_KB).expect("bundled knowledge base is valid")
    }

    pub fn empty() -> Self {
        KnowledgeBase {
            version: "empty".into(),
            entries: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| KbError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, KbError> {
        let mut kb: KnowledgeBase = serde_json::from_str(text)?;
        kb.validate()?;
        for e in &mut kb.entries {
            for k in &mut e.keywords {
                *k = k.to_lowercase();
            }
        }
        Ok(kb)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("knowledge base serializes")
    }

    pub fn validate(&self) -> Result<(), KbError> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if e.keywords.iter().all(|k| k.trim().is_empty()) {
                return Err(KbError::NoKeywords(e.entry_id.clone()));
            }
            if !ids.insert(e.entry_id.as_str()) {
                return Err(KbError::DuplicateId(e.entry_id.clone()));
            }
        }
        Ok(())
    }
}

/// Lowercases and maps every non-alphanumeric run to a single space.
fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut space = true;
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            out.push(ch);
            space = false;
        } else if !space {
            out.push(' ');
            space = true;
        }
    }
    out.truncate(out.trim_end().len());
    out
}

/// Entries whose keywords occur in the task description, ordered by the
/// number of matching keywords (descending) and then by entry id.
pub fn retrieve(kb: &KnowledgeBase, task: &TaskSpec) -> Vec<KnowledgeEntry> {
    let description = normalize(&task.description);
    let mut scored: Vec<(usize, &KnowledgeEntry)> = kb
        .entries
        .iter()
        .map(|e| {
            let score = e
                .keywords
                .iter()
                .map(|k| normalize(k))
                .filter(|k| !k.is_empty() && description.contains(k.as_str()))
                .count();
            (score, e)
        })
        .filter(|(s, _)| *s > 0)
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.entry_id.cmp(&b.1.entry_id)));
    scored.into_iter().map(|(_, e)| e.clone()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    Search,
}

impl Phase {
    pub fn for_operator(op: OperatorKind) -> Phase {
        if op == OperatorKind::Draft {
            Phase::Init
        } else {
            Phase::Search
        }
    }
}

/// Selects the retrieved entries handed to one expansion.
///
/// Drafts see model- and data-level entries with probability
/// `init_ref_prob`. During search, feature-engineering improvements see
/// data-level entries and competition-strategy improvements see
/// strategy-level entries; everything else gets nothing. The rng is only
/// drawn in the init phase.
pub fn injection_context<R: Rng + ?Sized>(
    entries: &[KnowledgeEntry],
    phase: Phase,
    operator: OperatorKind,
    init_ref_prob: f64,
    rng: &mut R,
) -> Vec<KnowledgeEntry> {
    if phase != Phase::for_operator(operator) {
        return Vec::new();
    }
    let pick = |levels: &[KnowledgeLevel]| -> Vec<KnowledgeEntry> {
        entries.iter().filter(|e| levels.contains(&e.level)).cloned().collect()
    };
    match (phase, operator) {
        (Phase::Init, _) => {
            if rng.random_bool(init_ref_prob.clamp(0.0, 1.0)) {
                pick(&[KnowledgeLevel::Model, KnowledgeLevel::Data])
            } else {
                Vec::new()
            }
        }
        (Phase::Search, OperatorKind::ImproveFE) => pick(&[KnowledgeLevel::Data]),
        (Phase::Search, OperatorKind::ImproveCS) => pick(&[KnowledgeLevel::Strategy]),
        _ => Vec::new(),
    }
}
