//! Seed dataset construction.
//!
//! Single-text tasks go through rationales: the LLM lists K reasons per
//! label, then every seed query picks a label uniformly, k of that label's
//! reasons without repetition, and asks for an example written with them.
//! Pair and QA tasks instead condition each query on a context drawn from a
//! user-supplied pool.
//!
//! All draws (labels, rationale subsets, contexts) happen up front from one
//! rng, so generation can fan out without changing the result. Slots whose
//! generation fails are redrawn afterwards, in slot order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetBuilder, DatasetError, Payload, Provenance};
use crate::llm::{self, Backend, GenerationParams, LlmError};
use crate::par::fan_out;
use crate::prompting::{context_bindings, Bindings, Placeholder, PromptError, Role};
use crate::task::{TaskKind, TaskSpec};
use crate::text::{join_phrases, sha256_hex};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("K must be >= 1")]
    ZeroK,
    #[error("k exceeds K: rationales_per_query ({k}) > rationale_count ({big_k})")]
    KExceedsK { k: usize, big_k: usize },
    #[error("{op} needs a {expected} task, got {found}")]
    WrongKind { op: &'static str, expected: &'static str, found: TaskKind },
    #[error("task has no `{0}` template")]
    MissingTemplate(Role),
    #[error("rationales for label `{label}`: {source}")]
    Rationales { label: String, source: LlmError },
    #[error("rationale set has no entry for label `{0}`")]
    MissingRationales(String),
    #[error("label `{label}` has {got} rationales, expected {expected}")]
    RationaleCount { label: String, got: usize, expected: usize },
    #[error("context pool is empty")]
    EmptyPool,
    #[error("context pool record {0} has no answer, which QA tasks need")]
    MissingAnswer(usize),
    #[error("context pool line {line}: {msg}")]
    PoolFormat { line: usize, msg: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("gave up after {failures} failed generations (retry budget {budget}); last error: {last}")]
    Exhausted { failures: usize, budget: usize, last: String },
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSampling {
    /// Independent uniform draws.
    #[default]
    WithReplacement,
    /// Shuffled passes over the pool; every context is used once before any
    /// is reused.
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub params: GenerationParams,
    /// Concurrent backend requests.
    pub parallel: usize,
    /// Completion attempts for each rationale list.
    pub rationale_attempts: u32,
    /// Extra draws allowed for failed slots before giving up. `None` means
    /// max(8, N/4).
    pub retry_budget: Option<usize>,
    /// Cycle labels instead of sampling them.
    pub balance: bool,
    pub context_sampling: ContextSampling,
    pub strip_echo: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            params: GenerationParams::default(),
            parallel: 4,
            rationale_attempts: 3,
            retry_budget: None,
            balance: false,
            context_sampling: ContextSampling::WithReplacement,
            strip_echo: true,
        }
    }
}

impl SynthesisConfig {
    fn budget(&self, n: usize) -> usize {
        self.retry_budget.unwrap_or((n / 4).max(8))
    }
}

/// K rationale phrases per label, in label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleSet {
    pub per_label: BTreeMap<String, Vec<String>>,
}

impl RationaleSet {
    pub fn get(&self, label: &str) -> Option<&[String]> {
        self.per_label.get(label).map(Vec::as_slice)
    }

    fn check(&self, spec: &TaskSpec) -> Result<(), SynthesisError> {
        for l in &spec.labels {
            let got = self.per_label.get(l).ok_or_else(|| SynthesisError::MissingRationales(l.clone()))?;
            if got.len() != spec.rationale_count {
                return Err(SynthesisError::RationaleCount {
                    label: l.clone(),
                    got: got.len(),
                    expected: spec.rationale_count,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextPool {
    pub items: Vec<ContextRecord>,
}

impl ContextPool {
    pub fn new(items: Vec<ContextRecord>) -> Self {
        Self { items }
    }

    /// JSON lines of `{"context": ..., "answer": ...}`.
    pub fn from_jsonl(text: &str) -> Result<Self, SynthesisError> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ContextRecord = serde_json::from_str(line)
                .map_err(|e| SynthesisError::PoolFormat { line: i + 1, msg: e.to_string() })?;
            items.push(r);
        }
        Ok(Self { items })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthesisError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| SynthesisError::Io { path: path.display().to_string(), source })?;
        Self::from_jsonl(&text)
    }
}

static ECHO_PREFIX: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:movie\s+)?(?:review|question|sentence|hypothesis|answer|text|output)\s*:\s*").unwrap()
});

/// Trims a completion and removes the usual ways models echo the request:
/// a leading copy of the prompt's last line, a `Review:`-style label, and
/// surrounding quotes.
pub fn clean_completion(prompt: &str, completion: &str) -> String {
    let mut s = completion.trim();
    if let Some(tail) = prompt.lines().map(str::trim).rfind(|l| !l.is_empty()) {
        if let Some(rest) = s.strip_prefix(tail) {
            s = rest.trim_start();
        }
    }
    if let Some(m) = ECHO_PREFIX.find(s) {
        s = &s[m.end()..];
    }
    let s = s.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim().to_string();
        }
    }
    s.to_string()
}

pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt)[..16].to_string()
}

pub fn synthesize_rationales(
    spec: &TaskSpec,
    backend: &dyn Backend,
    cfg: &SynthesisConfig,
) -> Result<RationaleSet, SynthesisError> {
    if spec.kind != TaskKind::SingleTextClassification {
        return Err(SynthesisError::WrongKind { op: "rationale synthesis", expected: "single-text", found: spec.kind });
    }
    if spec.rationale_count == 0 {
        return Err(SynthesisError::ZeroK);
    }
    let t = spec.template(Role::Ration).ok_or(SynthesisError::MissingTemplate(Role::Ration))?;
    let reasons = spec.reason_count.unwrap_or(spec.rationale_count);
    let lists = fan_out(&spec.labels, cfg.parallel, |_, label| {
        llm::top_k_rationales(backend, label, t, spec.rationale_count, reasons, &cfg.params, cfg.rationale_attempts)
    });
    let mut per_label = BTreeMap::new();
    for (label, r) in spec.labels.iter().zip(lists) {
        let r = r.map_err(|source| SynthesisError::Rationales { label: label.clone(), source })?;
        per_label.insert(label.clone(), r);
    }
    Ok(RationaleSet { per_label })
}

/// One planned query.
struct Slot {
    prompt: String,
    payload: Box<dyn Fn(String) -> Payload + Send + Sync>,
}

/// Generates one example per slot, then redraws failed slots in order.
fn run_slots(
    spec: &TaskSpec,
    backend: &dyn Backend,
    cfg: &SynthesisConfig,
    slots: Vec<Slot>,
    mut redraw: impl FnMut() -> Result<Slot, SynthesisError>,
) -> Result<Dataset, SynthesisError> {
    let n = slots.len();
    let attempt = |slot: &Slot, sample_index: u64| -> Result<Option<String>, LlmError> {
        let text = llm::generate_one(backend, &cfg.params.request(slot.prompt.clone(), sample_index))?;
        let text = if cfg.strip_echo { clean_completion(&slot.prompt, &text) } else { text.trim().to_string() };
        Ok(Some(text).filter(|t| !t.is_empty()))
    };
    let results = fan_out(&slots, cfg.parallel, |i, slot| attempt(slot, i as u64));

    let mut done: Vec<Option<(String, Payload)>> = Vec::with_capacity(n);
    let mut failures = 0usize;
    let mut last = String::new();
    let budget = cfg.budget(n);
    for (slot, r) in slots.iter().zip(results) {
        match r {
            Ok(Some(text)) => done.push(Some((slot.prompt.clone(), (slot.payload)(text)))),
            Ok(None) => {
                last = "empty completion".into();
                done.push(None);
            }
            Err(e) if e.is_fatal() => return Err(e.into()),
            Err(e) => {
                last = e.to_string();
                done.push(None);
            }
        }
    }
    let mut extra = 0u64;
    for entry in done.iter_mut().filter(|d| d.is_none()) {
        loop {
            failures += 1;
            if failures > budget {
                return Err(SynthesisError::Exhausted { failures: failures - 1, budget, last });
            }
            let slot = redraw()?;
            let r = attempt(&slot, n as u64 + extra);
            extra += 1;
            match r {
                Ok(Some(text)) => {
                    log::debug!("seed slot redrawn after failure: {last}");
                    *entry = Some((slot.prompt.clone(), (slot.payload)(text)));
                    break;
                }
                Ok(None) => last = "empty completion".into(),
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => last = e.to_string(),
            }
        }
    }
    if failures > 0 {
        log::warn!("{failures} seed generation(s) failed and were redrawn");
    }
    let mut b = DatasetBuilder::for_spec(spec);
    for (prompt, payload) in done.into_iter().flatten() {
        b.push(payload, Provenance::seed(Some(prompt_hash(&prompt))))?;
    }
    Ok(b.finish())
}

fn draw_label<'a>(spec: &'a TaskSpec, cfg: &SynthesisConfig, i: usize, rng: &mut ChaCha8Rng) -> &'a str {
    if cfg.balance {
        &spec.labels[i % spec.labels.len()]
    } else {
        &spec.labels[rng.random_range(0..spec.labels.len())]
    }
}

/// Rationale-guided seed synthesis for single-text tasks.
pub fn synthesize_seed(
    spec: &TaskSpec,
    rations: &RationaleSet,
    backend: &dyn Backend,
    rng: &mut ChaCha8Rng,
    cfg: &SynthesisConfig,
) -> Result<Dataset, SynthesisError> {
    if spec.kind != TaskKind::SingleTextClassification {
        return Err(SynthesisError::WrongKind {
            op: "rationale seed synthesis",
            expected: "single-text",
            found: spec.kind,
        });
    }
    if spec.rationales_per_query > spec.rationale_count {
        return Err(SynthesisError::KExceedsK { k: spec.rationales_per_query, big_k: spec.rationale_count });
    }
    let t = spec.template(Role::Query1).ok_or(SynthesisError::MissingTemplate(Role::Query1))?.clone();
    if spec.seed_size == 0 {
        return Ok(Dataset::empty(spec));
    }
    rations.check(spec)?;
    let mut counter = 0usize;
    let mut plan = |rng: &mut ChaCha8Rng| -> Result<Slot, SynthesisError> {
        let label = draw_label(spec, cfg, counter, rng).to_string();
        counter += 1;
        let pool = rations.get(&label).expect("checked");
        let picked: Vec<String> =
            sample(rng, pool.len(), spec.rationales_per_query).iter().map(|j| pool[j].clone()).collect();
        let mut b = Bindings::new();
        b.insert(Placeholder::X, join_phrases(&picked));
        b.insert(Placeholder::Y, label.clone());
        let prompt = t.render(&b)?;
        Ok(Slot { prompt, payload: Box::new(move |x| Payload::TextLabel { x, y: label.clone() }) })
    };
    let slots = (0..spec.seed_size).map(|_| plan(rng)).collect::<Result<Vec<_>, _>>()?;
    run_slots(spec, backend, cfg, slots, || plan(rng))
}

/// Context-conditioned seed synthesis for pair and QA tasks.
pub fn synthesize_seed_conditional(
    spec: &TaskSpec,
    pool: &ContextPool,
    backend: &dyn Backend,
    rng: &mut ChaCha8Rng,
    cfg: &SynthesisConfig,
) -> Result<Dataset, SynthesisError> {
    if spec.kind == TaskKind::SingleTextClassification {
        return Err(SynthesisError::WrongKind {
            op: "conditional seed synthesis",
            expected: "pair or QA",
            found: spec.kind,
        });
    }
    if pool.items.is_empty() {
        return Err(SynthesisError::EmptyPool);
    }
    let qa = spec.kind == TaskKind::ContextQa;
    if qa {
        if let Some(i) = pool.items.iter().position(|r| r.answer.as_deref().is_none_or(|a| a.trim().is_empty())) {
            return Err(SynthesisError::MissingAnswer(i));
        }
    }
    let t = spec.template(Role::Query2).ok_or(SynthesisError::MissingTemplate(Role::Query2))?.clone();
    if spec.seed_size == 0 {
        return Ok(Dataset::empty(spec));
    }
    let mut counter = 0usize;
    let mut order: Vec<usize> = Vec::new();
    let mut plan = |rng: &mut ChaCha8Rng| -> Result<Slot, SynthesisError> {
        let ci = match cfg.context_sampling {
            ContextSampling::WithReplacement => rng.random_range(0..pool.items.len()),
            ContextSampling::Epoch => {
                if order.is_empty() {
                    order = sample(rng, pool.items.len(), pool.items.len()).into_vec();
                    order.reverse();
                }
                order.pop().expect("refilled")
            }
        };
        let rec = pool.items[ci].clone();
        let label = (!qa).then(|| draw_label(spec, cfg, counter, rng).to_string());
        counter += 1;
        let prompt = t.render(&context_bindings(&rec.context, rec.answer.as_deref(), label.as_deref()))?;
        let payload: Box<dyn Fn(String) -> Payload + Send + Sync> = match label {
            Some(y) => Box::new(move |x| Payload::PairLabel { context: rec.context.clone(), x, y: y.clone() }),
            None => Box::new(move |q| Payload::ContextQa {
                context: rec.context.clone(),
                answer: rec.answer.clone().unwrap_or_default(),
                question: q,
            }),
        };
        Ok(Slot { prompt, payload })
    };
    let slots = (0..spec.seed_size).map(|_| plan(rng)).collect::<Result<Vec<_>, _>>()?;
    run_slots(spec, backend, cfg, slots, || plan(rng))
}
