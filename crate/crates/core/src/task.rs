//! Task configuration.
//!
//! A task file is a JSON document:
//!
//! ```json
//! {
//!   "name": "imdb-demo",
//!   "kind": "single_text_classification",
//!   "labels": ["positive", "negative"],
//!   "builtin": "imdb",
//!   "templates": { "mis1": { "body": "Write a <Y> review like: <X>" } },
//!   "rationale_count": 3,
//!   "rationales_per_query": 2,
//!   "reason_count": 3,
//!   "seed_size": 200,
//!   "ees_rounds": 2,
//!   "qa_f1_threshold": 0.5,
//!   "dedup": false
//! }
//! ```
//!
//! `builtin` pulls the default templates (and labels, when `labels` is
//! omitted) for one of the four bundled datasets; entries under `templates`
//! override individual roles.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{self, BuiltinDataset, PromptError, PromptTemplate, Role};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("reading task file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing task file: {0}")]
    Parse(String),
    #[error("k exceeds K: rationales_per_query ({k}) > rationale_count ({big_k})")]
    KExceedsK { k: usize, big_k: usize },
    #[error("missing template role(s) for {kind}: {}", roles.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", "))]
    MissingRoles { kind: TaskKind, roles: Vec<Role> },
    #[error("template registered under `{key}` declares role `{declared}`")]
    RoleMismatch { key: Role, declared: Role },
    #[error("label set is empty; only context_qa tasks may omit labels")]
    NoLabels,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("qa_f1_threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("rationales_per_query must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleTextClassification,
    PairClassification,
    ContextQa,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SingleTextClassification => "single_text_classification",
            TaskKind::PairClassification => "pair_classification",
            TaskKind::ContextQa => "context_qa",
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::ContextQa)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Ordered; the order is the classifier's tie-break order.
    pub labels: Vec<String>,
    pub templates: BTreeMap<Role, PromptTemplate>,
    /// K: rationales requested per label.
    pub rationale_count: usize,
    /// k: rationales placed into each seed query.
    pub rationales_per_query: usize,
    /// Value bound to `<X>` in the rationale prompt. Defaults to K.
    pub reason_count: Option<usize>,
    pub seed_size: usize,
    pub ees_rounds: usize,
    pub qa_f1_threshold: f64,
    pub dedup: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    name: String,
    kind: TaskKind,
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(default)]
    builtin: Option<BuiltinDataset>,
    #[serde(default)]
    templates: BTreeMap<Role, TemplateEntry>,
    #[serde(default = "default_k_big")]
    rationale_count: usize,
    #[serde(default = "default_k_small")]
    rationales_per_query: usize,
    #[serde(default)]
    reason_count: Option<usize>,
    seed_size: usize,
    #[serde(default = "default_rounds")]
    ees_rounds: usize,
    #[serde(default = "default_threshold")]
    qa_f1_threshold: f64,
    #[serde(default)]
    dedup: bool,
}

#[derive(Deserialize)]
struct TemplateEntry {
    body: String,
    #[serde(default)]
    label_map: BTreeMap<String, String>,
}

fn default_k_big() -> usize {
    5
}
fn default_k_small() -> usize {
    3
}
fn default_rounds() -> usize {
    2
}
fn default_threshold() -> f64 {
    0.5
}

impl TaskSpec {
    /// Checks every invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.rationales_per_query > self.rationale_count {
            return Err(TaskError::KExceedsK { k: self.rationales_per_query, big_k: self.rationale_count });
        }
        if self.rationales_per_query == 0 && self.kind == TaskKind::SingleTextClassification {
            return Err(TaskError::ZeroK);
        }
        if self.labels.is_empty() && self.kind.is_classification() {
            return Err(TaskError::NoLabels);
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(TaskError::DuplicateLabel(l.clone()));
            }
        }
        if !(0.0..=1.0).contains(&self.qa_f1_threshold) {
            return Err(TaskError::Threshold(self.qa_f1_threshold));
        }
        for (key, t) in &self.templates {
            if t.role() != *key {
                return Err(TaskError::RoleMismatch { key: *key, declared: t.role() });
            }
        }
        let missing: Vec<Role> =
            Role::required_for(self.kind).iter().copied().filter(|r| !self.templates.contains_key(r)).collect();
        if !missing.is_empty() {
            return Err(TaskError::MissingRoles { kind: self.kind, roles: missing });
        }
        Ok(())
    }

    pub fn template(&self, role: Role) -> Option<&PromptTemplate> {
        self.templates.get(&role)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn from_json(json: &str) -> Result<Self, TaskError> {
        let f: TaskFile = serde_json::from_str(json).map_err(|e| TaskError::Parse(e.to_string()))?;
        let mut templates = BTreeMap::new();
        let mut labels = f.labels;
        if let Some(b) = f.builtin {
            let bt = prompting::builtin(b);
            templates = bt.templates;
            if labels.is_none() {
                labels = Some(bt.labels);
            }
        }
        for (role, e) in f.templates {
            templates.insert(role, PromptTemplate::new(role, e.body)?.with_label_map(e.label_map));
        }
        let spec = TaskSpec {
            name: f.name,
            kind: f.kind,
            labels: labels.unwrap_or_default(),
            templates,
            rationale_count: f.rationale_count,
            rationales_per_query: f.rationales_per_query,
            reason_count: f.reason_count,
            seed_size: f.seed_size,
            ees_rounds: f.ees_rounds,
            qa_f1_threshold: f.qa_f1_threshold,
            dedup: f.dedup,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Serializes back to the task-file schema with all templates inlined.
    pub fn to_json(&self) -> String {
        let templates: BTreeMap<&str, serde_json::Value> = self
            .templates
            .iter()
            .map(|(r, t)| {
                let mut v = serde_json::json!({ "body": t.body() });
                if !t.label_map().is_empty() {
                    v["label_map"] = serde_json::to_value(t.label_map()).unwrap();
                }
                (r.as_str(), v)
            })
            .collect();
        let mut doc = serde_json::json!({
            "name": self.name,
            "kind": self.kind,
            "labels": self.labels,
            "templates": templates,
            "rationale_count": self.rationale_count,
            "rationales_per_query": self.rationales_per_query,
            "seed_size": self.seed_size,
            "ees_rounds": self.ees_rounds,
            "qa_f1_threshold": self.qa_f1_threshold,
            "dedup": self.dedup,
        });
        if let Some(n) = self.reason_count {
            doc["reason_count"] = n.into();
        }
        serde_json::to_string_pretty(&doc).unwrap()
    }
}

pub fn load_task_spec(path: impl AsRef<Path>) -> Result<TaskSpec, TaskError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| TaskError::Io { path: path.display().to_string(), source })?;
    TaskSpec::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMDB: &str = r#"{"name":"imdb","kind":"single_text_classification",
        "labels":["positive","negative"],"builtin":"imdb","rationale_count":3,
        "rationales_per_query":2,"seed_size":10}"#;

    #[test]
    fn imdb_config_loads() {
        let s = TaskSpec::from_json(IMDB).unwrap();
        assert_eq!(s.kind, TaskKind::SingleTextClassification);
        assert_eq!(s.labels, ["positive", "negative"]);
        assert_eq!(s.ees_rounds, 2);
        assert!(!s.dedup);
        assert_eq!(s.templates.len(), 3);
    }

    #[test]
    fn round_trips_through_json() {
        let s = TaskSpec::from_json(IMDB).unwrap();
        let again = TaskSpec::from_json(&s.to_json()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn k_larger_than_big_k() {
        let j = IMDB.replace("\"rationales_per_query\":2", "\"rationales_per_query\":5");
        let err = TaskSpec::from_json(&j).unwrap_err();
        assert!(err.to_string().starts_with("k exceeds K"), "{err}");
    }

    #[test]
    fn missing_mis_template_is_listed() {
        let j = r#"{"name":"t","kind":"single_text_classification","labels":["a","b"],
            "templates":{"ration":{"body":"<X> <Y>"},"query1":{"body":"<X> <Y>"}},"seed_size":1}"#;
        let err = TaskSpec::from_json(j).unwrap_err();
        assert!(matches!(&err, TaskError::MissingRoles { roles, .. } if roles == &[Role::Mis1]));
        assert!(err.to_string().contains("mis1"));
    }

    #[test]
    fn qa_may_omit_labels_classification_may_not() {
        let qa = r#"{"name":"q","kind":"context_qa","builtin":"adqa","seed_size":3}"#;
        assert!(TaskSpec::from_json(qa).unwrap().labels.is_empty());
        let cls = r#"{"name":"c","kind":"pair_classification","labels":[],"builtin":"rte","seed_size":3}"#;
        assert!(matches!(TaskSpec::from_json(cls), Err(TaskError::NoLabels)));
    }

    #[test]
    fn parse_failure_is_reported() {
        assert!(matches!(TaskSpec::from_json("{not json"), Err(TaskError::Parse(_))));
        assert!(matches!(
            TaskSpec::from_json(r#"{"name":"x","kind":"regression","seed_size":1}"#),
            Err(TaskError::Parse(_))
        ));
    }
}
