//! The small model: training, prediction and error extraction.
//!
//! Two backends: [`NaiveBayes`], a multinomial naive Bayes classifier that
//! runs in-process, and [`ExternalTrainer`], which drives a subprocess over
//! a JSON-lines protocol so a real fine-tuning stack can be plugged in.

mod external;
mod naive_bayes;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Example, Payload};
use crate::metrics::{exact_match, token_f1, MetricsError};
use crate::task::{TaskKind, TaskSpec};

pub use external::{ExternalTrainer, PROTOCOL_VERSION};
pub use naive_bayes::{NaiveBayes, NaiveBayesModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("{backend} does not support {kind} tasks")]
    UnsupportedKind { backend: String, kind: TaskKind },
    #[error("model was trained for {expected} data, got {found}")]
    KindMismatch { expected: TaskKind, found: TaskKind },
    #[error("smoothing must be positive, got {0}")]
    Smoothing(f64),
    #[error("external trainer needs a command")]
    NoCommand,
    #[error("external trainer: {0}")]
    Protocol(String),
    #[error("external trainer reported: {0}")]
    Remote(String),
    #[error("model is stale: the external trainer has been retrained since")]
    Stale,
    #[error("external trainer i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Misaligned(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Label(String),
    Answer(String),
}

impl Prediction {
    pub fn text(&self) -> &str {
        match self {
            Prediction::Label(s) | Prediction::Answer(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicted {
    pub id: String,
    #[serde(flatten)]
    pub prediction: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// One prediction per input example, in input order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionSet {
    items: Vec<Predicted>,
}

impl PredictionSet {
    pub fn new(items: Vec<Predicted>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Predicted> {
        self.items.iter()
    }

    pub fn items(&self) -> &[Predicted] {
        &self.items
    }

    pub fn check_aligned(&self, gold: &Dataset) -> Result<(), MetricsError> {
        if self.items.len() != gold.len() {
            return Err(MetricsError::Misaligned { preds: self.items.len(), gold: gold.len() });
        }
        for (i, (p, g)) in self.items.iter().zip(gold).enumerate() {
            if p.id != g.id {
                return Err(MetricsError::IdMismatch { index: i, expected: g.id.clone(), found: p.id.clone() });
            }
        }
        Ok(())
    }

    /// Reads JSON lines of `{"id", "label"|"answer", "score"?}`.
    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            items.push(serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        Ok(Self { items })
    }

    pub fn to_jsonl(&self) -> String {
        self.items.iter().map(|p| serde_json::to_string(p).unwrap() + "\n").collect()
    }
}

impl<'a> IntoIterator for &'a PredictionSet {
    type Item = &'a Predicted;
    type IntoIter = std::slice::Iter<'a, Predicted>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// A trained, immutable model.
pub trait Model: Send + Sync {
    fn kind(&self) -> TaskKind;
    fn predict(&self, d: &Dataset) -> Result<PredictionSet, TrainError>;
}

pub trait Trainer: Send + Sync {
    fn name(&self) -> String;
    /// Trains a fresh model from scratch; nothing carries over between calls.
    fn train(&self, spec: &TaskSpec, d: &Dataset) -> Result<Box<dyn Model>, TrainError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerBackend {
    BuiltinNb,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub backend: TrainerBackend,
    pub smoothing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_cmd: Option<Vec<String>>,
    /// Forwarded untouched to the external trainer.
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            backend: TrainerBackend::BuiltinNb,
            smoothing: 1.0,
            external_cmd: None,
            hyperparameters: BTreeMap::new(),
        }
    }
}

impl TrainerConfig {
    pub fn build(&self) -> Result<Box<dyn Trainer>, TrainError> {
        match self.backend {
            TrainerBackend::BuiltinNb => Ok(Box::new(NaiveBayes::new(self.smoothing)?)),
            TrainerBackend::External => {
                let cmd = self.external_cmd.as_ref().filter(|c| !c.is_empty()).ok_or(TrainError::NoCommand)?;
                Ok(Box::new(ExternalTrainer::spawn(cmd, self.hyperparameters.clone())?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Misclassified {
    /// The gold example's id.
    pub error_id: String,
    pub example: Example,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MisclassifiedSet {
    pub items: Vec<Misclassified>,
}

impl MisclassifiedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Misclassified> {
        self.items.iter()
    }

    /// The misclassified gold examples as a dataset.
    pub fn to_dataset(&self, spec: &TaskSpec) -> Dataset {
        let mut b = crate::dataset::DatasetBuilder::for_spec(spec);
        for m in &self.items {
            b.push_example(m.example.clone()).expect("gold examples are valid");
        }
        b.finish()
    }
}

/// Whether `pred` counts as correct for `gold` under the task's rule:
/// label equality for classification, EM or F1 at the threshold for QA.
pub fn is_correct(pred: &Prediction, gold: &Payload, spec: &TaskSpec) -> bool {
    match (gold, pred) {
        (Payload::ContextQa { answer, .. }, Prediction::Answer(a)) => {
            exact_match(a, answer) == 1 || token_f1(a, answer) >= spec.qa_f1_threshold
        }
        (Payload::ContextQa { .. }, Prediction::Label(_)) => false,
        (_, p) => Some(p.text()) == gold.label(),
    }
}

pub fn misclassified(preds: &PredictionSet, gold: &Dataset, spec: &TaskSpec) -> Result<MisclassifiedSet, TrainError> {
    preds.check_aligned(gold)?;
    let items = preds
        .iter()
        .zip(gold)
        .filter(|(p, g)| !is_correct(&p.prediction, &g.payload, spec))
        .map(|(p, g)| Misclassified { error_id: g.id.clone(), example: g.clone(), prediction: p.prediction.clone() })
        .collect();
    Ok(MisclassifiedSet { items })
}
