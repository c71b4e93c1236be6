//! Error extrapolation.
//!
//! Each round retrains the small model from scratch on the seed data plus
//! everything added so far, collects the gold-validation examples it gets
//! wrong, and asks the LLM for new examples "similar to" each of them,
//! keeping the error's label (and context, for pair and QA tasks). The loop
//! stops after the configured number of rounds, when no validation errors
//! remain, or when the validation metric stops improving.
//!
//! Gold test data, when given, is only ever scored.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{merge, Dataset, DatasetBuilder, DatasetError, Payload, Provenance};
use crate::llm::{self, Backend, GenerationParams, GenerationRequest, LlmError};
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::par::fan_out;
use crate::prompting::{example_bindings, PromptError, Role};
use crate::synthesis::{clean_completion, prompt_hash};
use crate::task::{TaskKind, TaskSpec};
use crate::trainer::{misclassified, MisclassifiedSet, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum EesError {
    #[error("gold validation set is empty but {0} round(s) were requested")]
    EmptyValidation(usize),
    #[error("task has no `{0}` template")]
    MissingTemplate(Role),
    #[error("expansion must be at least 1")]
    ZeroExpansion,
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EesConfig {
    pub rounds: usize,
    /// New examples generated per error.
    pub expansion: usize,
    pub params: GenerationParams,
    pub parallel: usize,
    /// Generation attempts per new example before it is skipped.
    pub attempts: u32,
    /// Stop once the validation metric gains less than this over the
    /// previous round. `None` disables the rule.
    pub min_improvement: Option<f64>,
    pub strip_echo: bool,
}

impl Default for EesConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            expansion: 1,
            params: GenerationParams::default(),
            parallel: 4,
            attempts: 3,
            min_improvement: Some(0.005),
            strip_echo: true,
        }
    }
}

impl EesConfig {
    pub fn from_spec(spec: &TaskSpec) -> Self {
        Self { rounds: spec.ees_rounds, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub train_size: usize,
    pub val: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricsReport>,
    pub misclassified: usize,
    /// Examples added for the next round (0 on the final report).
    pub added: usize,
    pub generation_failures: usize,
    pub backend_calls: u64,
    /// Excluded from the serialized form so reports stay reproducible.
    #[serde(skip)]
    pub wall_time_ms: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RoundsExhausted,
    NoErrors,
    Converged,
}

#[derive(Debug, Clone)]
pub struct EesOutcome {
    pub final_dataset: Dataset,
    /// One per trained model: rounds 0..=R' where R' is the number of
    /// extrapolation rounds actually run.
    pub reports: Vec<RoundReport>,
    /// `misclassified[q]` fed `added[q]`.
    pub misclassified: Vec<MisclassifiedSet>,
    /// `added[q]` carries round q+1 provenance.
    pub added: Vec<Dataset>,
    pub stop: StopReason,
}

/// Counts calls passing through to the real backend.
struct Counting<'a> {
    inner: &'a dyn Backend,
    calls: AtomicU64,
}

impl Backend for Counting<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, LlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(req)
    }
}

pub struct Extrapolated {
    pub dataset: Dataset,
    pub failures: usize,
}

/// New examples for each error: `expansion` per error, labelled (and, for
/// pair and QA, contextualized) exactly like the error. Errors whose
/// generation keeps failing are skipped and counted.
pub fn extrapolate_errors(
    mis: &MisclassifiedSet,
    spec: &TaskSpec,
    backend: &dyn Backend,
    round: u32,
    cfg: &EesConfig,
) -> Result<Extrapolated, EesError> {
    if cfg.expansion == 0 {
        return Err(EesError::ZeroExpansion);
    }
    let role = if spec.kind == TaskKind::SingleTextClassification { Role::Mis1 } else { Role::Mis2 };
    let t = spec.template(role).ok_or(EesError::MissingTemplate(role))?;
    let jobs: Vec<(usize, usize)> = (0..mis.len()).flat_map(|i| (0..cfg.expansion).map(move |j| (i, j))).collect();
    let prompts = mis.iter().map(|m| t.render(&example_bindings(&m.example.payload))).collect::<Result<Vec<_>, _>>()?;

    let results = fan_out(&jobs, cfg.parallel, |_, &(i, j)| -> Result<Option<String>, LlmError> {
        let prompt = &prompts[i];
        let mut last = None;
        for attempt in 0..cfg.attempts.max(1) as u64 {
            let index = ((round as u64) << 40) + (attempt << 32) + (i * cfg.expansion + j) as u64;
            match llm::generate_one(backend, &cfg.params.request(prompt.clone(), index)) {
                Ok(text) => {
                    let text = if cfg.strip_echo { clean_completion(prompt, &text) } else { text.trim().to_string() };
                    if !text.is_empty() {
                        return Ok(Some(text));
                    }
                    last = Some("empty completion".to_string());
                }
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => last = Some(e.to_string()),
            }
        }
        log::warn!("skipping error {}: {}", mis.items[i].error_id, last.unwrap_or_default());
        Ok(None)
    });

    let mut b = DatasetBuilder::for_spec(spec);
    let mut failures = 0;
    for (&(i, _), r) in jobs.iter().zip(results) {
        let Some(text) = r? else {
            failures += 1;
            continue;
        };
        let m = &mis.items[i];
        let payload = match &m.example.payload {
            Payload::TextLabel { y, .. } => Payload::TextLabel { x: text, y: y.clone() },
            Payload::PairLabel { context, y, .. } => {
                Payload::PairLabel { context: context.clone(), x: text, y: y.clone() }
            }
            Payload::ContextQa { context, answer, .. } => {
                Payload::ContextQa { context: context.clone(), answer: answer.clone(), question: text }
            }
        };
        b.push(payload, Provenance::add(round, m.error_id.clone(), Some(prompt_hash(&prompts[i]))))?;
    }
    Ok(Extrapolated { dataset: b.finish(), failures })
}

pub fn run_ees(
    spec: &TaskSpec,
    seed: &Dataset,
    gold_val: &Dataset,
    gold_test: Option<&Dataset>,
    trainer: &dyn Trainer,
    backend: &dyn Backend,
    cfg: &EesConfig,
) -> Result<EesOutcome, EesError> {
    if cfg.rounds > 0 && gold_val.is_empty() {
        return Err(EesError::EmptyValidation(cfg.rounds));
    }
    let counting = Counting { inner: backend, calls: AtomicU64::new(0) };
    let mut added: Vec<Dataset> = Vec::new();
    let mut mis_sets = Vec::new();
    let mut reports: Vec<RoundReport> = Vec::new();
    let mut stop = StopReason::RoundsExhausted;
    let mut q = 0usize;
    loop {
        let started = Instant::now();
        let calls_before = counting.calls.load(Ordering::Relaxed);
        let mut parts: Vec<&Dataset> = vec![seed];
        parts.extend(added.iter());
        let train = merge(spec, &parts)?;
        let model = trainer.train(spec, &train)?;

        let (val, mis) = if gold_val.is_empty() {
            (MetricsReport { n: 0, accuracy: None, em: None, f1: None }, MisclassifiedSet::default())
        } else {
            let preds = model.predict(gold_val)?;
            (evaluate(&preds, gold_val)?, misclassified(&preds, gold_val, spec)?)
        };
        let test = match gold_test {
            Some(t) if !t.is_empty() => Some(evaluate(&model.predict(t)?, t)?),
            _ => None,
        };
        log::info!(
            "round {q}: train={} val={:.4} errors={}{}",
            train.len(),
            val.headline(),
            mis.len(),
            test.as_ref().map(|t| format!(" test={:.4}", t.headline())).unwrap_or_default()
        );

        let converged = match (cfg.min_improvement, reports.last()) {
            (Some(delta), Some(prev)) => val.headline() - prev.val.headline() < delta,
            _ => false,
        };
        let next = if q >= cfg.rounds {
            None
        } else if mis.is_empty() {
            stop = StopReason::NoErrors;
            None
        } else if converged {
            stop = StopReason::Converged;
            None
        } else {
            Some(extrapolate_errors(&mis, spec, &counting, (q + 1) as u32, cfg)?)
        };

        let mut report = RoundReport {
            round: q,
            train_size: train.len(),
            val,
            test,
            misclassified: mis.len(),
            added: 0,
            generation_failures: 0,
            backend_calls: 0,
            wall_time_ms: 0,
        };
        let Some(ex) = next else {
            report.wall_time_ms = started.elapsed().as_millis();
            reports.push(report);
            return Ok(EesOutcome { final_dataset: train, reports, misclassified: mis_sets, added, stop });
        };
        report.added = ex.dataset.len();
        report.generation_failures = ex.failures;
        report.backend_calls = counting.calls.load(Ordering::Relaxed) - calls_before;
        report.wall_time_ms = started.elapsed().as_millis();
        reports.push(report);
        mis_sets.push(mis);
        added.push(ex.dataset);
        q += 1;
    }
}
