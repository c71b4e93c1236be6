//! Subprocess trainer speaking JSON lines over stdin/stdout.
//!
//! ```text
//! -> {"cmd":"hello","protocol_version":1}
//! <- {"ok":true,"kinds":["single_text_classification"],"name":"...","protocol_version":1}
//! -> {"cmd":"train","dataset":[...],"config":{...},"task":{...}}
//! <- {"ok":true,"train_report":{...}}
//! -> {"cmd":"predict","examples":[...]}
//! <- {"ok":true,"predictions":["positive", {"label":"negative","score":0.7}, ...]}
//! -> {"cmd":"shutdown"}
//! <- {"ok":true}
//! ```
//!
//! Large training sets go through a temporary JSONL file referenced by
//! `dataset_path` instead of the inline `dataset` array. Anything the child
//! writes to stderr is logged line by line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use crate::dataset::{example_json, write_dataset, Dataset};
use crate::task::{TaskKind, TaskSpec};

use super::{Model, Predicted, Prediction, PredictionSet, TrainError, Trainer};

pub const PROTOCOL_VERSION: u32 = 1;
const DEFAULT_INLINE_LIMIT: usize = 5000;

struct Proc {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    generation: u64,
}

impl Proc {
    fn request(&mut self, msg: &Value) -> Result<Value, TrainError> {
        let mut line = serde_json::to_string(msg).expect("json values serialize");
        line.push('\n');
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.flush()?;
        let mut reply = String::new();
        if self.stdout.read_line(&mut reply)? == 0 {
            return Err(TrainError::Protocol("process closed its output".into()));
        }
        let v: Value = serde_json::from_str(reply.trim())
            .map_err(|e| TrainError::Protocol(format!("unparseable reply {:?}: {e}", reply.trim())))?;
        match v.get("ok").and_then(Value::as_bool) {
            Some(true) => Ok(v),
            Some(false) => Err(TrainError::Remote(
                v.get("error").map(|e| e.as_str().map(str::to_string).unwrap_or(e.to_string())).unwrap_or_default(),
            )),
            None => Err(TrainError::Protocol(format!("reply without `ok`: {}", reply.trim()))),
        }
    }
}

pub struct ExternalTrainer {
    proc: Arc<Mutex<Proc>>,
    name: String,
    kinds: Vec<TaskKind>,
    hyperparameters: BTreeMap<String, Value>,
    inline_limit: usize,
}

impl ExternalTrainer {
    /// Starts the process and performs the hello handshake.
    pub fn spawn(cmd: &[String], hyperparameters: BTreeMap<String, Value>) -> Result<Self, TrainError> {
        let (program, args) = cmd.split_first().ok_or(TrainError::NoCommand)?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| TrainError::Protocol(format!("cannot start `{program}`: {e}")))?;
        let stderr = child.stderr.take().expect("piped");
        let tag = program.clone();
        std::thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                log::info!(target: "s3::trainer::external", "[{tag}] {line}");
            }
        });
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        let mut proc = Proc { child, stdin, stdout, generation: 0 };
        let hello = proc.request(&json!({ "cmd": "hello", "protocol_version": PROTOCOL_VERSION }))?;
        if let Some(v) = hello.get("protocol_version").and_then(Value::as_u64) {
            if v != PROTOCOL_VERSION as u64 {
                return Err(TrainError::Protocol(format!("speaks protocol {v}, expected {PROTOCOL_VERSION}")));
            }
        }
        let kinds = hello
            .get("kinds")
            .cloned()
            .map(serde_json::from_value::<Vec<TaskKind>>)
            .transpose()
            .map_err(|e| TrainError::Protocol(format!("bad `kinds` in hello: {e}")))?
            .unwrap_or_default();
        let name = hello.get("name").and_then(Value::as_str).unwrap_or(program).to_string();
        Ok(Self { proc: Arc::new(Mutex::new(proc)), name, kinds, hyperparameters, inline_limit: DEFAULT_INLINE_LIMIT })
    }

    /// Training sets larger than this many examples are passed by file.
    pub fn with_inline_limit(mut self, limit: usize) -> Self {
        self.inline_limit = limit;
        self
    }

    pub fn kinds(&self) -> &[TaskKind] {
        &self.kinds
    }
}

impl Trainer for ExternalTrainer {
    fn name(&self) -> String {
        format!("external:{}", self.name)
    }

    fn train(&self, spec: &TaskSpec, d: &Dataset) -> Result<Box<dyn Model>, TrainError> {
        if !self.kinds.contains(&spec.kind) {
            return Err(TrainError::UnsupportedKind { backend: self.name(), kind: spec.kind });
        }
        if d.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut msg = json!({
            "cmd": "train",
            "config": self.hyperparameters,
            "task": { "name": spec.name, "kind": spec.kind, "labels": spec.labels },
        });
        // Kept alive until the reply arrives.
        let mut _file = None;
        if d.len() > self.inline_limit {
            let mut f = tempfile::Builder::new().suffix(".jsonl").tempfile()?;
            write_dataset(d, f.as_file_mut())?;
            f.as_file_mut().flush()?;
            msg["dataset_path"] = json!(f.path().to_string_lossy());
            _file = Some(f);
        } else {
            msg["dataset"] = Value::Array(d.iter().map(example_json).collect());
        }
        let mut p = self.proc.lock().unwrap();
        let reply = p.request(&msg)?;
        if let Some(r) = reply.get("train_report") {
            log::debug!("external train report: {r}");
        }
        p.generation += 1;
        Ok(Box::new(ExternalModel { proc: self.proc.clone(), generation: p.generation, kind: spec.kind }))
    }
}

impl Drop for ExternalTrainer {
    fn drop(&mut self) {
        if let Ok(mut p) = self.proc.lock() {
            if let Err(e) = p.request(&json!({ "cmd": "shutdown" })) {
                log::warn!("external trainer shutdown: {e}");
                let _ = p.child.kill();
            }
            let _ = p.child.wait();
        }
    }
}

struct ExternalModel {
    proc: Arc<Mutex<Proc>>,
    generation: u64,
    kind: TaskKind,
}

fn parse_prediction(v: &Value, kind: TaskKind) -> Result<(Prediction, Option<f64>), TrainError> {
    let wrap = |s: &str| {
        if kind == TaskKind::ContextQa {
            Prediction::Answer(s.to_string())
        } else {
            Prediction::Label(s.to_string())
        }
    };
    match v {
        Value::String(s) => Ok((wrap(s), None)),
        Value::Object(o) => {
            let text = o
                .get("label")
                .or_else(|| o.get("answer"))
                .and_then(Value::as_str)
                .ok_or_else(|| TrainError::Protocol(format!("prediction without label/answer: {v}")))?;
            Ok((wrap(text), o.get("score").and_then(Value::as_f64)))
        }
        _ => Err(TrainError::Protocol(format!("unexpected prediction {v}"))),
    }
}

impl Model for ExternalModel {
    fn kind(&self) -> TaskKind {
        self.kind
    }

    fn predict(&self, d: &Dataset) -> Result<PredictionSet, TrainError> {
        if d.kind() != self.kind {
            return Err(TrainError::KindMismatch { expected: self.kind, found: d.kind() });
        }
        if d.is_empty() {
            return Ok(PredictionSet::default());
        }
        let mut p = self.proc.lock().unwrap();
        if p.generation != self.generation {
            return Err(TrainError::Stale);
        }
        let reply = p.request(&json!({
            "cmd": "predict",
            "examples": d.iter().map(example_json).collect::<Vec<_>>(),
        }))?;
        let preds = reply
            .get("predictions")
            .and_then(Value::as_array)
            .ok_or_else(|| TrainError::Protocol("predict reply without `predictions`".into()))?;
        if preds.len() != d.len() {
            return Err(TrainError::Protocol(format!("{} predictions for {} examples", preds.len(), d.len())));
        }
        let items = preds
            .iter()
            .zip(d)
            .map(|(v, ex)| {
                let (prediction, score) = parse_prediction(v, self.kind)?;
                Ok(Predicted { id: ex.id.clone(), prediction, score })
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(PredictionSet::new(items))
    }
}
