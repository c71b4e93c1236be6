//! Task metrics and training-cost accounting.
//!
//! Answer normalization for EM/F1 is the usual QA convention: lowercase,
//! drop ASCII punctuation, drop the articles `a`, `an`, `the`, collapse
//! whitespace.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Payload};
use crate::task::TaskKind;
use crate::trainer::{Prediction, PredictionSet};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot score an empty set")]
    Empty,
    #[error("{preds} predictions for {gold} gold examples")]
    Misaligned { preds: usize, gold: usize },
    #[error("prediction {index} has id `{found}`, gold has `{expected}`")]
    IdMismatch { index: usize, expected: String, found: String },
    #[error("prediction {index} is a {found} but the task needs a {expected}")]
    WrongPredictionKind { index: usize, expected: &'static str, found: &'static str },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

impl MetricsReport {
    /// Accuracy for classification, F1 for QA.
    pub fn headline(&self) -> f64 {
        self.accuracy.or(self.f1).unwrap_or(0.0)
    }
}

pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lowered.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

/// Harmonic mean of bag-of-token precision and recall.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], gold: &[G]) -> Result<f64, MetricsError> {
    if preds.len() != gold.len() {
        return Err(MetricsError::Misaligned { preds: preds.len(), gold: gold.len() });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = preds.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Scores a prediction set against gold data of the same order and ids.
pub fn evaluate(preds: &PredictionSet, gold: &Dataset) -> Result<MetricsReport, MetricsError> {
    preds.check_aligned(gold)?;
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = gold.len();
    if gold.kind() == TaskKind::ContextQa {
        let (mut em, mut f1) = (0.0, 0.0);
        for (i, (p, g)) in preds.iter().zip(gold).enumerate() {
            let Payload::ContextQa { answer, .. } = &g.payload else { unreachable!("dataset kind checked") };
            let Prediction::Answer(a) = &p.prediction else {
                return Err(MetricsError::WrongPredictionKind { index: i, expected: "answer", found: "label" });
            };
            em += exact_match(a, answer) as f64;
            f1 += token_f1(a, answer);
        }
        Ok(MetricsReport { n, accuracy: None, em: Some(em / n as f64), f1: Some(f1 / n as f64) })
    } else {
        let mut labels = Vec::with_capacity(n);
        for (i, p) in preds.iter().enumerate() {
            match &p.prediction {
                Prediction::Label(l) => labels.push(l.as_str()),
                Prediction::Answer(_) => {
                    return Err(MetricsError::WrongPredictionKind { index: i, expected: "label", found: "answer" })
                }
            }
        }
        let gold_labels: Vec<&str> = gold.iter().map(|e| e.label().unwrap_or_default()).collect();
        Ok(MetricsReport { n, accuracy: Some(accuracy(&labels, &gold_labels)?), em: None, f1: None })
    }
}

/// Training FLOPs per token per parameter for transformer encoders.
pub const FLOPS_PER_TOKEN_PARAM: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingStage {
    pub records: f64,
    pub epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFlops {
    pub records: f64,
    pub epochs: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_record_flops: f64,
    pub per_stage: Vec<StageFlops>,
    pub total: f64,
}

/// Fine-tuning cost: `6 * seq_len * n_para` per record per epoch, summed
/// over stages.
// Negated comparisons so that NaN is rejected too.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn flops(n_para: f64, seq_len: f64, stages: &[TrainingStage]) -> Result<FlopsReport, MetricsError> {
    if !(n_para > 0.0) {
        return Err(MetricsError::NonPositive("parameter count"));
    }
    if !(seq_len > 0.0) {
        return Err(MetricsError::NonPositive("sequence length"));
    }
    let per_record = FLOPS_PER_TOKEN_PARAM * seq_len * n_para;
    let mut per_stage = Vec::with_capacity(stages.len());
    for s in stages {
        if !(s.records > 0.0) {
            return Err(MetricsError::NonPositive("stage records"));
        }
        if !(s.epochs > 0.0) {
            return Err(MetricsError::NonPositive("stage epochs"));
        }
        per_stage.push(StageFlops { records: s.records, epochs: s.epochs, flops: per_record * s.records * s.epochs });
    }
    let total = per_stage.iter().map(|s| s.flops).sum();
    Ok(FlopsReport { per_record_flops: per_record, per_stage, total })
}
