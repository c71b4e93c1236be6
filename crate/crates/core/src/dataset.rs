//! Examples, provenance and JSON-lines persistence.
//!
//! On disk a dataset is one header line followed by one record per line:
//!
//! ```text
//! {"schema_version":1,"task":"imdb-demo","kind":"single_text_classification"}
//! {"id":"3fa1c0d2e9b4-0","kind":"single_text_classification","x":"...","y":"positive","provenance":{"stage":"seed","round":0,"prompt_hash":"..."}}
//! ```
//!
//! Absent fields are omitted. Field order is fixed by the record struct so
//! saving the same dataset twice yields identical bytes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{TaskKind, TaskSpec};
use crate::text::{sha256_hex, squash_whitespace};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: record kind {found} does not match task kind {expected}")]
    KindMismatch { line: usize, expected: TaskKind, found: TaskKind },
    #[error("line {line}: label `{label}` is not in the task's label set")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate example id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("example kind {found} does not match dataset kind {expected}")]
    WrongKind { expected: TaskKind, found: TaskKind },
    #[error("invalid provenance: {0}")]
    Provenance(String),
    #[error("cannot merge datasets of different tasks ({a}/{a_kind} vs {b}/{b_kind})")]
    MixedTasks { a: String, a_kind: TaskKind, b: String, b_kind: TaskKind },
    #[error("context_qa example has an empty answer")]
    EmptyAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Seed,
    Add,
    GoldVal,
    GoldTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_error_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
}

impl Provenance {
    pub fn seed(prompt_hash: Option<String>) -> Self {
        Self { stage: Stage::Seed, round: 0, source_error_id: None, prompt_hash }
    }

    pub fn add(round: u32, source_error_id: impl Into<String>, prompt_hash: Option<String>) -> Self {
        Self { stage: Stage::Add, round, source_error_id: Some(source_error_id.into()), prompt_hash }
    }

    pub fn gold(stage: Stage) -> Self {
        Self { stage, round: 0, source_error_id: None, prompt_hash: None }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.stage == Stage::Add {
            if self.round < 1 {
                return Err(DatasetError::Provenance("stage=add requires round >= 1".into()));
            }
            if self.source_error_id.is_none() {
                return Err(DatasetError::Provenance("stage=add requires source_error_id".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Payload {
    TextLabel { x: String, y: String },
    PairLabel { context: String, x: String, y: String },
    ContextQa { context: String, answer: String, question: String },
}

impl Payload {
    pub fn kind(&self) -> TaskKind {
        match self {
            Payload::TextLabel { .. } => TaskKind::SingleTextClassification,
            Payload::PairLabel { .. } => TaskKind::PairClassification,
            Payload::ContextQa { .. } => TaskKind::ContextQa,
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Payload::TextLabel { y, .. } | Payload::PairLabel { y, .. } => Some(y),
            Payload::ContextQa { .. } => None,
        }
    }

    /// The synthesized part of the example: `x` for classification kinds,
    /// the question for QA.
    pub fn target_text(&self) -> &str {
        match self {
            Payload::TextLabel { x, .. } | Payload::PairLabel { x, .. } => x,
            Payload::ContextQa { question, .. } => question,
        }
    }

    pub fn context(&self) -> Option<&str> {
        match self {
            Payload::TextLabel { .. } => None,
            Payload::PairLabel { context, .. } | Payload::ContextQa { context, .. } => Some(context),
        }
    }

    fn fields(&self) -> [&str; 3] {
        match self {
            Payload::TextLabel { x, y } => [x, y, ""],
            Payload::PairLabel { context, x, y } => [context, x, y],
            Payload::ContextQa { context, answer, question } => [context, answer, question],
        }
    }

    /// Whitespace-normalized payload used for duplicate detection.
    pub fn dedup_key(&self) -> String {
        let mut key = self.kind().as_str().to_string();
        for f in self.fields() {
            key.push('\u{1f}');
            key.push_str(&squash_whitespace(f));
        }
        key
    }

    fn content_hash(&self) -> String {
        let mut buf = self.kind().as_str().to_string();
        for f in self.fields() {
            buf.push('\u{1f}');
            buf.push_str(f);
        }
        sha256_hex(buf)[..12].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub payload: Payload,
    pub provenance: Provenance,
}

impl Example {
    pub fn label(&self) -> Option<&str> {
        self.payload.label()
    }
}

/// An immutable, ordered collection of examples for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    task: String,
    kind: TaskKind,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn empty(spec: &TaskSpec) -> Self {
        Self { task: spec.name.clone(), kind: spec.kind, examples: Vec::new() }
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn builder(&self) -> DatasetBuilder {
        let mut b = DatasetBuilder::new(&self.task, self.kind);
        for e in &self.examples {
            b.push_example(e.clone()).expect("dataset examples are already valid");
        }
        b
    }

    /// Examples at the given indices, in the given order, ids kept.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut b = DatasetBuilder::new(&self.task, self.kind);
        for &i in indices {
            b.push_example(self.examples[i].clone()).expect("valid");
        }
        b.finish()
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Single-writer builder. Ids are `<content hash>-<n>` where `n` counts
/// earlier examples with the same content hash.
#[derive(Debug)]
pub struct DatasetBuilder {
    task: String,
    kind: TaskKind,
    examples: Vec<Example>,
    hash_counts: HashMap<String, usize>,
    ids: HashSet<String>,
}

impl DatasetBuilder {
    pub fn new(task: &str, kind: TaskKind) -> Self {
        Self { task: task.to_string(), kind, examples: Vec::new(), hash_counts: HashMap::new(), ids: HashSet::new() }
    }

    pub fn for_spec(spec: &TaskSpec) -> Self {
        Self::new(&spec.name, spec.kind)
    }

    fn check(&self, payload: &Payload, provenance: &Provenance) -> Result<(), DatasetError> {
        if payload.kind() != self.kind {
            return Err(DatasetError::WrongKind { expected: self.kind, found: payload.kind() });
        }
        if let Payload::ContextQa { answer, .. } = payload {
            if answer.trim().is_empty() {
                return Err(DatasetError::EmptyAnswer);
            }
        }
        provenance.validate()
    }

    fn fresh_id(&mut self, payload: &Payload) -> String {
        let h = payload.content_hash();
        let n = self.hash_counts.entry(h.clone()).or_insert(0);
        loop {
            let id = format!("{h}-{n}");
            *n += 1;
            if !self.ids.contains(&id) {
                return id;
            }
        }
    }

    pub fn push(&mut self, payload: Payload, provenance: Provenance) -> Result<&Example, DatasetError> {
        self.check(&payload, &provenance)?;
        let id = self.fresh_id(&payload);
        self.ids.insert(id.clone());
        self.examples.push(Example { id, payload, provenance });
        Ok(self.examples.last().unwrap())
    }

    /// Keeps the example's id unless it is already taken, in which case a
    /// fresh one is assigned. Provenance is never touched.
    pub fn push_example(&mut self, mut ex: Example) -> Result<&Example, DatasetError> {
        self.check(&ex.payload, &ex.provenance)?;
        if self.ids.contains(&ex.id) {
            ex.id = self.fresh_id(&ex.payload);
        }
        self.ids.insert(ex.id.clone());
        self.examples.push(ex);
        Ok(self.examples.last().unwrap())
    }

    fn push_exact(&mut self, ex: Example, line: usize) -> Result<(), DatasetError> {
        self.check(&ex.payload, &ex.provenance)?;
        if !self.ids.insert(ex.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: ex.id });
        }
        self.examples.push(ex);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn finish(self) -> Dataset {
        Dataset { task: self.task, kind: self.kind, examples: self.examples }
    }
}

/// Concatenates `parts` in order. With `spec.dedup` on, later examples whose
/// normalized payload equals an earlier one are dropped.
pub fn merge(spec: &TaskSpec, parts: &[&Dataset]) -> Result<Dataset, DatasetError> {
    let mut b = DatasetBuilder::for_spec(spec);
    let mut seen = HashSet::new();
    for part in parts {
        if part.kind != spec.kind || part.task != spec.name {
            return Err(DatasetError::MixedTasks {
                a: spec.name.clone(),
                a_kind: spec.kind,
                b: part.task.clone(),
                b_kind: part.kind,
            });
        }
        for ex in part.iter() {
            if spec.dedup && !seen.insert(ex.payload.dedup_key()) {
                continue;
            }
            b.push_example(ex.clone())?;
        }
    }
    Ok(b.finish())
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    task: String,
    kind: TaskKind,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub(crate) struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl Record {
    pub(crate) fn from_example(ex: &Example) -> Self {
        let mut r = Record {
            id: Some(ex.id.clone()),
            kind: Some(ex.payload.kind()),
            provenance: Some(ex.provenance.clone()),
            ..Default::default()
        };
        match &ex.payload {
            Payload::TextLabel { x, y } => {
                r.x = Some(x.clone());
                r.y = Some(y.clone());
            }
            Payload::PairLabel { context, x, y } => {
                r.context = Some(context.clone());
                r.x = Some(x.clone());
                r.y = Some(y.clone());
            }
            Payload::ContextQa { context, answer, question } => {
                r.context = Some(context.clone());
                r.question = Some(question.clone());
                r.answer = Some(answer.clone());
            }
        }
        r
    }

    fn into_payload(
        self,
        kind: TaskKind,
        line: usize,
    ) -> Result<(Option<String>, Payload, Option<Provenance>), DatasetError> {
        let need = |v: Option<String>, f: &str| {
            v.ok_or_else(|| DatasetError::Malformed { line, msg: format!("missing field `{f}` for {kind}") })
        };
        let payload = match kind {
            TaskKind::SingleTextClassification => Payload::TextLabel { x: need(self.x, "x")?, y: need(self.y, "y")? },
            TaskKind::PairClassification => Payload::PairLabel {
                context: need(self.context, "context")?,
                x: need(self.x, "x")?,
                y: need(self.y, "y")?,
            },
            TaskKind::ContextQa => Payload::ContextQa {
                context: need(self.context, "context")?,
                answer: need(self.answer, "answer")?,
                question: need(self.question, "question")?,
            },
        };
        Ok((self.id, payload, self.provenance))
    }
}

pub(crate) fn example_json(ex: &Example) -> serde_json::Value {
    serde_json::to_value(Record::from_example(ex)).expect("records serialize")
}

/// Parses a record (as produced by `example_json`) into an example of the
/// given kind, validating its label against `spec`.
pub(crate) fn example_from_json(
    v: serde_json::Value,
    spec: &TaskSpec,
    default_stage: Option<Stage>,
    line: usize,
) -> Result<(Option<String>, Payload, Provenance), DatasetError> {
    let rec: Record = serde_json::from_value(v).map_err(|e| DatasetError::Malformed { line, msg: e.to_string() })?;
    if let Some(k) = rec.kind {
        if k != spec.kind {
            return Err(DatasetError::KindMismatch { line, expected: spec.kind, found: k });
        }
    }
    let (id, payload, prov) = rec.into_payload(spec.kind, line)?;
    if let Some(y) = payload.label() {
        if !spec.labels.iter().any(|l| l == y) {
            return Err(DatasetError::UnknownLabel { line, label: y.to_string() });
        }
    }
    let prov = match (prov, default_stage) {
        (Some(p), _) => p,
        (None, Some(stage)) => Provenance::gold(stage),
        (None, None) => return Err(DatasetError::Malformed { line, msg: "missing field `provenance`".into() }),
    };
    if let Payload::ContextQa { answer, .. } = &payload {
        if answer.trim().is_empty() {
            return Err(DatasetError::Malformed { line, msg: "empty answer".into() });
        }
    }
    Ok((id, payload, prov))
}

pub fn write_dataset(d: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    let header = Header { schema_version: SCHEMA_VERSION, task: d.task.clone(), kind: d.kind };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for ex in d.iter() {
        serde_json::to_writer(&mut *w, &Record::from_example(ex))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_dataset(d, &mut w).map_err(io)?;
    w.flush().map_err(io)
}

/// Loads a dataset whose records all carry provenance.
pub fn load_dataset(path: impl AsRef<Path>, spec: &TaskSpec) -> Result<Dataset, DatasetError> {
    load_impl(path.as_ref(), spec, None)
}

/// Loads externally prepared data (typically gold splits): records without
/// provenance get `stage`, records without an id get a content id.
pub fn load_dataset_as(path: impl AsRef<Path>, spec: &TaskSpec, stage: Stage) -> Result<Dataset, DatasetError> {
    load_impl(path.as_ref(), spec, Some(stage))
}

fn load_impl(path: &Path, spec: &TaskSpec, default_stage: Option<Stage>) -> Result<Dataset, DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    read_dataset(reader, spec, default_stage).map_err(|e| match e {
        DatasetError::Io { source, .. } => io(source),
        other => other,
    })
}

pub fn read_dataset(
    reader: impl BufRead,
    spec: &TaskSpec,
    default_stage: Option<Stage>,
) -> Result<Dataset, DatasetError> {
    let mut b = DatasetBuilder::for_spec(spec);
    let mut anonymous = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| DatasetError::Io { path: String::new(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed { line: lineno, msg: e.to_string() })?;
        if v.get("schema_version").is_some() {
            let h: Header =
                serde_json::from_value(v).map_err(|e| DatasetError::Malformed { line: lineno, msg: e.to_string() })?;
            if h.kind != spec.kind {
                return Err(DatasetError::KindMismatch { line: lineno, expected: spec.kind, found: h.kind });
            }
            if h.task != spec.name {
                log::warn!("dataset header names task `{}`, loading under `{}`", h.task, spec.name);
            }
            continue;
        }
        let (id, payload, provenance) = example_from_json(v, spec, default_stage, lineno)?;
        match id {
            Some(id) => b.push_exact(Example { id, payload, provenance }, lineno)?,
            None => anonymous.push((payload, provenance)),
        }
    }
    // Content ids are assigned after all explicit ids are known.
    for (payload, provenance) in anonymous {
        b.push(payload, provenance)?;
    }
    Ok(b.finish())
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Seed => "seed",
            Stage::Add => "add",
            Stage::GoldVal => "gold_val",
            Stage::GoldTest => "gold_test",
        })
    }
}
