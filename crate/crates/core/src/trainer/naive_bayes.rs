use std::collections::HashMap;

use crate::dataset::{Dataset, Payload};
use crate::task::{TaskKind, TaskSpec};
use crate::text::tokenize;

use super::{Model, Predicted, Prediction, PredictionSet, TrainError, Trainer};

/// Marks the boundary between context and target for pair tasks. The
/// tokenizer never emits underscores, so it cannot collide with real text.
const SEP: &str = "__sep__";

fn features(p: &Payload) -> Vec<String> {
    match p {
        Payload::TextLabel { x, .. } => tokenize(x),
        Payload::PairLabel { context, x, .. } => {
            let mut t = tokenize(context);
            t.push(SEP.to_string());
            t.extend(tokenize(x));
            t
        }
        Payload::ContextQa { .. } => unreachable!("rejected at train time"),
    }
}

/// Multinomial naive Bayes with additive smoothing.
#[derive(Debug, Clone)]
pub struct NaiveBayes {
    alpha: f64,
}

impl NaiveBayes {
    pub fn new(alpha: f64) -> Result<Self, TrainError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(TrainError::Smoothing(alpha));
        }
        Ok(Self { alpha })
    }

    pub fn fit(&self, spec: &TaskSpec, d: &Dataset) -> Result<NaiveBayesModel, TrainError> {
        if d.kind() == TaskKind::ContextQa || spec.kind == TaskKind::ContextQa {
            return Err(TrainError::UnsupportedKind { backend: self.name(), kind: TaskKind::ContextQa });
        }
        if d.kind() != spec.kind {
            return Err(TrainError::KindMismatch { expected: spec.kind, found: d.kind() });
        }
        if d.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let labels = spec.labels.clone();
        let mut docs = vec![0usize; labels.len()];
        let mut vocab: HashMap<String, usize> = HashMap::new();
        let mut counts: Vec<HashMap<usize, f64>> = vec![HashMap::new(); labels.len()];
        let mut totals = vec![0f64; labels.len()];
        for ex in d {
            let y = ex.label().and_then(|l| spec.label_index(l)).expect("dataset labels are validated");
            docs[y] += 1;
            for tok in features(&ex.payload) {
                let next = vocab.len();
                let w = *vocab.entry(tok).or_insert(next);
                *counts[y].entry(w).or_default() += 1.0;
                totals[y] += 1.0;
            }
        }
        let v = vocab.len() as f64;
        let n = d.len() as f64;
        let log_prior = docs.iter().map(|&c| (c as f64 / n).ln()).collect();
        let log_lik = counts
            .iter()
            .zip(&totals)
            .map(|(c, &t)| {
                let denom = (t + self.alpha * v).ln();
                (0..vocab.len()).map(|w| (c.get(&w).copied().unwrap_or(0.0) + self.alpha).ln() - denom).collect()
            })
            .collect();
        Ok(NaiveBayesModel { kind: spec.kind, labels, vocab, log_prior, log_lik })
    }
}

impl Trainer for NaiveBayes {
    fn name(&self) -> String {
        format!("builtin_nb(alpha={})", self.alpha)
    }

    fn train(&self, spec: &TaskSpec, d: &Dataset) -> Result<Box<dyn Model>, TrainError> {
        Ok(Box::new(self.fit(spec, d)?))
    }
}

#[derive(Debug, Clone)]
pub struct NaiveBayesModel {
    kind: TaskKind,
    labels: Vec<String>,
    vocab: HashMap<String, usize>,
    log_prior: Vec<f64>,
    /// `log_lik[class][word]`
    log_lik: Vec<Vec<f64>>,
}

impl NaiveBayesModel {
    /// Per-class log scores. Tokens never seen in training are skipped.
    pub fn scores(&self, p: &Payload) -> Vec<f64> {
        let toks: Vec<usize> = features(p).iter().filter_map(|t| self.vocab.get(t).copied()).collect();
        self.log_prior
            .iter()
            .zip(&self.log_lik)
            .map(|(&prior, lik)| prior + toks.iter().map(|&w| lik[w]).sum::<f64>())
            .collect()
    }

    /// Index of the best class; ties go to the lower index.
    pub fn best(scores: &[f64]) -> usize {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }
}

impl Model for NaiveBayesModel {
    fn kind(&self) -> TaskKind {
        self.kind
    }

    fn predict(&self, d: &Dataset) -> Result<PredictionSet, TrainError> {
        if d.kind() != self.kind {
            return Err(TrainError::KindMismatch { expected: self.kind, found: d.kind() });
        }
        let items = d
            .iter()
            .map(|ex| {
                let s = self.scores(&ex.payload);
                let b = Self::best(&s);
                // Posterior of the chosen class.
                let z: f64 = s.iter().map(|v| (v - s[b]).exp()).sum();
                Predicted {
                    id: ex.id.clone(),
                    prediction: Prediction::Label(self.labels[b].clone()),
                    score: Some(1.0 / z),
                }
            })
            .collect();
        Ok(PredictionSet::new(items))
    }
}
