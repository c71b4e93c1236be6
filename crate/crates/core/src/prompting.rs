//! Prompt templates and their renderer.
//!
//! Template bodies use angle-bracket placeholders: `<X>`, `<Y>` and the
//! field forms `<X["premise"]>`, `<X["question"]>`, `<X["Hypothesis"]>`,
//! `<X["context"]>`, `<X["answer"]>`. The two-character sequence `\n` in a
//! body renders as a newline. Bound values are inserted verbatim; the only
//! value that is rewritten is `<Y>`, which goes through the template's
//! label map (internal label -> label word).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Payload;
use crate::task::TaskKind;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unbound placeholder {0}")]
    Unbound(Placeholder),
    #[error("binding for placeholder {0} which the template does not use")]
    UnusedBinding(Placeholder),
    #[error("unrecognized placeholder `{0}` in template body")]
    UnknownPlaceholder(String),
    #[error("unknown dataset `{0}` (expected imdb, qnli, rte or adqa)")]
    UnknownDataset(String),
    #[error("unknown template role `{0}`")]
    UnknownRole(String),
    #[error("template override file: {0}")]
    Override(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ration,
    Query1,
    Query2,
    Mis1,
    Mis2,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Ration => "ration",
            Role::Query1 => "query1",
            Role::Query2 => "query2",
            Role::Mis1 => "mis1",
            Role::Mis2 => "mis2",
        }
    }

    /// Roles a task of the given kind cannot run without.
    pub fn required_for(kind: TaskKind) -> &'static [Role] {
        match kind {
            TaskKind::SingleTextClassification => &[Role::Ration, Role::Query1, Role::Mis1],
            TaskKind::PairClassification | TaskKind::ContextQa => &[Role::Query2, Role::Mis2],
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ration" => Role::Ration,
            "query1" => Role::Query1,
            "query2" => Role::Query2,
            "mis1" => Role::Mis1,
            "mis2" => Role::Mis2,
            other => return Err(PromptError::UnknownRole(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Premise,
    Question,
    Hypothesis,
    Context,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    X,
    Y,
    Field(Field),
}

impl Placeholder {
    pub fn token(self) -> &'static str {
        match self {
            Placeholder::X => "<X>",
            Placeholder::Y => "<Y>",
            Placeholder::Field(Field::Premise) => r#"<X["premise"]>"#,
            Placeholder::Field(Field::Question) => r#"<X["question"]>"#,
            Placeholder::Field(Field::Hypothesis) => r#"<X["Hypothesis"]>"#,
            Placeholder::Field(Field::Context) => r#"<X["context"]>"#,
            Placeholder::Field(Field::Answer) => r#"<X["answer"]>"#,
        }
    }

    fn from_token(tok: &str) -> Option<Self> {
        const ALL: [Placeholder; 7] = [
            Placeholder::X,
            Placeholder::Y,
            Placeholder::Field(Field::Premise),
            Placeholder::Field(Field::Question),
            Placeholder::Field(Field::Hypothesis),
            Placeholder::Field(Field::Context),
            Placeholder::Field(Field::Answer),
        ];
        ALL.into_iter().find(|p| p.token() == tok)
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

static PLACEHOLDER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"<[A-Z](?:\["[^"<>]*"\])?>"#).unwrap());

pub type Bindings = BTreeMap<Placeholder, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemplateRepr", into = "TemplateRepr")]
pub struct PromptTemplate {
    role: Role,
    body: String,
    label_map: BTreeMap<String, String>,
    placeholders: Vec<Placeholder>,
}

#[derive(Serialize, Deserialize)]
struct TemplateRepr {
    role: Role,
    body: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    label_map: BTreeMap<String, String>,
}

impl TryFrom<TemplateRepr> for PromptTemplate {
    type Error = PromptError;

    fn try_from(r: TemplateRepr) -> Result<Self, Self::Error> {
        PromptTemplate::new(r.role, r.body).map(|t| t.with_label_map(r.label_map))
    }
}

impl From<PromptTemplate> for TemplateRepr {
    fn from(t: PromptTemplate) -> Self {
        TemplateRepr { role: t.role, body: t.body, label_map: t.label_map }
    }
}

impl PromptTemplate {
    pub fn new(role: Role, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let mut placeholders = Vec::new();
        for m in PLACEHOLDER_RE.find_iter(&body) {
            let p = Placeholder::from_token(m.as_str())
                .ok_or_else(|| PromptError::UnknownPlaceholder(m.as_str().to_string()))?;
            if !placeholders.contains(&p) {
                placeholders.push(p);
            }
        }
        Ok(Self { role, body, label_map: BTreeMap::new(), placeholders })
    }

    pub fn with_label_map(mut self, label_map: BTreeMap<String, String>) -> Self {
        self.label_map = label_map;
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn label_map(&self) -> &BTreeMap<String, String> {
        &self.label_map
    }

    /// Placeholders in order of first appearance.
    pub fn placeholders(&self) -> &[Placeholder] {
        &self.placeholders
    }

    pub fn label_word<'a>(&'a self, label: &'a str) -> &'a str {
        self.label_map.get(label).map(String::as_str).unwrap_or(label)
    }

    /// Renders with any extra bindings ignored.
    pub fn render(&self, bindings: &Bindings) -> Result<String, PromptError> {
        self.render_impl(bindings, false)
    }

    /// Renders and rejects bindings for placeholders absent from the body.
    pub fn render_strict(&self, bindings: &Bindings) -> Result<String, PromptError> {
        self.render_impl(bindings, true)
    }

    fn render_impl(&self, bindings: &Bindings, strict: bool) -> Result<String, PromptError> {
        if let Some(p) = self.placeholders.iter().find(|p| !bindings.contains_key(p)) {
            return Err(PromptError::Unbound(*p));
        }
        if strict {
            if let Some(p) = bindings.keys().find(|p| !self.placeholders.contains(p)) {
                return Err(PromptError::UnusedBinding(*p));
            }
        }
        let mut out = String::with_capacity(self.body.len() + 64);
        let mut last = 0;
        for m in PLACEHOLDER_RE.find_iter(&self.body) {
            out.push_str(&expand_newlines(&self.body[last..m.start()]));
            // Validated in `new`.
            let p = Placeholder::from_token(m.as_str()).unwrap();
            let value = &bindings[&p];
            if p == Placeholder::Y {
                out.push_str(self.label_word(value));
            } else {
                out.push_str(value);
            }
            last = m.end();
        }
        out.push_str(&expand_newlines(&self.body[last..]));
        Ok(out)
    }
}

fn expand_newlines(s: &str) -> String {
    s.replace("\\n", "\n")
}

/// Bindings for every placeholder an example can answer. `render` ignores
/// the ones a template does not use.
pub fn example_bindings(payload: &Payload) -> Bindings {
    let mut b = Bindings::new();
    match payload {
        Payload::TextLabel { x, y } => {
            b.insert(Placeholder::X, x.clone());
            b.insert(Placeholder::Y, y.clone());
        }
        Payload::PairLabel { context, x, y } => {
            b.insert(Placeholder::X, context.clone());
            b.insert(Placeholder::Field(Field::Premise), context.clone());
            b.insert(Placeholder::Field(Field::Context), context.clone());
            b.insert(Placeholder::Field(Field::Question), x.clone());
            b.insert(Placeholder::Field(Field::Hypothesis), x.clone());
            b.insert(Placeholder::Y, y.clone());
        }
        Payload::ContextQa { context, answer, question } => {
            b.insert(Placeholder::X, context.clone());
            b.insert(Placeholder::Field(Field::Premise), context.clone());
            b.insert(Placeholder::Field(Field::Context), context.clone());
            b.insert(Placeholder::Field(Field::Answer), answer.clone());
            b.insert(Placeholder::Field(Field::Question), question.clone());
        }
    }
    b
}

/// Bindings for a conditional seed query: the context (and answer for QA)
/// plus the target label when the task has one.
pub fn context_bindings(context: &str, answer: Option<&str>, label: Option<&str>) -> Bindings {
    let mut b = Bindings::new();
    b.insert(Placeholder::X, context.to_string());
    b.insert(Placeholder::Field(Field::Premise), context.to_string());
    b.insert(Placeholder::Field(Field::Context), context.to_string());
    if let Some(a) = answer {
        b.insert(Placeholder::Field(Field::Answer), a.to_string());
    }
    if let Some(y) = label {
        b.insert(Placeholder::Y, y.to_string());
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinDataset {
    Imdb,
    Qnli,
    Rte,
    Adqa,
}

impl FromStr for BuiltinDataset {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "imdb" => Ok(Self::Imdb),
            "qnli" => Ok(Self::Qnli),
            "rte" => Ok(Self::Rte),
            "adqa" => Ok(Self::Adqa),
            _ => Err(PromptError::UnknownDataset(s.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltinTask {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub templates: BTreeMap<Role, PromptTemplate>,
}

pub fn builtin_templates(name: &str) -> Result<BuiltinTask, PromptError> {
    Ok(builtin(name.parse()?))
}

pub fn builtin(dataset: BuiltinDataset) -> BuiltinTask {
    fn t(role: Role, body: &str, map: &[(&str, &str)]) -> (Role, PromptTemplate) {
        let label_map = map.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        (role, PromptTemplate::new(role, body).expect("builtin template parses").with_label_map(label_map))
    }
    let labels = |ls: &[&str]| ls.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match dataset {
        BuiltinDataset::Imdb => BuiltinTask {
            kind: TaskKind::SingleTextClassification,
            labels: labels(&["positive", "negative"]),
            templates: [
                t(
                    Role::Ration,
                    "Imagine you are watching a movie; consider <X> reasons that may lead to <Y> impression of the movie.",
                    &[],
                ),
                t(
                    Role::Query1,
                    "Now imagine that you just watched a movie that has <X>. Now you should write a <Y> review about this movie.",
                    &[],
                ),
                t(Role::Mis1, "Write a <Y> movie similar to: \\n <X>", &[]),
            ]
            .into_iter()
            .collect(),
        },
        BuiltinDataset::Qnli => {
            let map = [("entailment", "in"), ("not_entailment", "not in")];
            BuiltinTask {
                kind: TaskKind::PairClassification,
                labels: labels(&["entailment", "not_entailment"]),
                templates: [
                    t(
                        Role::Query2,
                        "Given an information paragraph: <X> \\n Please ask a question that has answers <Y> the information paragraph",
                        &map,
                    ),
                    t(
                        Role::Mis2,
                        "Given a premise: <X[\"premise\"]> \\n And here is a question: <X[\"question\"]> that the answer of question is <Y> the premise.\\nPlease write another question similar to the given question and have answers <Y> the premise.",
                        &map,
                    ),
                ]
                .into_iter()
                .collect(),
            }
        }
        BuiltinDataset::Rte => {
            let map = [("entailment", "correct"), ("not_entailment", "wrong")];
            BuiltinTask {
                kind: TaskKind::PairClassification,
                labels: labels(&["entailment", "not_entailment"]),
                templates: [
                    t(
                        Role::Query2,
                        "<X> \\nBased on the above description, the following sentence is definitely <Y>:",
                        &map,
                    ),
                    t(
                        Role::Mis2,
                        "<X[\"premise\"]> \\nBased on the above description, the following sentence: <X[\"Hypothesis\"]> is definitely <Y>. Now write a sentence similar to the given sentence and is definitely <Y> based on the given description.",
                        &map,
                    ),
                ]
                .into_iter()
                .collect(),
            }
        }
        BuiltinDataset::Adqa => BuiltinTask {
            kind: TaskKind::ContextQa,
            labels: Vec::new(),
            templates: [
                t(
                    Role::Query2,
                    "Given a context: <X[\"context\"]> \\n<X[\"answer\"]> is the answer to the following question:",
                    &[],
                ),
                t(
                    Role::Mis2,
                    "Given a context: <X[\"context\"]> \\n<X[\"answer\"]> is the answer to: <X[\"question\"]>.\\nA question that has the same answer in the context is:",
                    &[],
                ),
            ]
            .into_iter()
            .collect(),
        },
    }
}

#[derive(Deserialize)]
struct OverrideEntry {
    body: String,
    #[serde(default)]
    label_map: BTreeMap<String, String>,
}

/// Parses a template override document: a JSON object mapping role name to
/// `{"body": ..., "label_map": {...}}`.
pub fn parse_overrides(json: &str) -> Result<BTreeMap<Role, PromptTemplate>, PromptError> {
    let raw: BTreeMap<String, OverrideEntry> =
        serde_json::from_str(json).map_err(|e| PromptError::Override(e.to_string()))?;
    raw.into_iter()
        .map(|(role, e)| {
            let role: Role = role.parse()?;
            Ok((role, PromptTemplate::new(role, e.body)?.with_label_map(e.label_map)))
        })
        .collect()
}
