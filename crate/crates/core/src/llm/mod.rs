//! Text generation backends.
//!
//! Everything that talks to a language model goes through [`Backend`].
//! Three implementations ship: [`RemoteBackend`] for OpenAI-compatible
//! chat-completions servers, [`ScriptedOracle`] for offline runs, and
//! [`CachedBackend`], which wraps either one with a persistent response
//! cache.

mod cache;
mod oracle;
mod remote;

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{Bindings, Placeholder, PromptError, PromptTemplate, Role};

pub use cache::{cache_key, CacheStats, CachedBackend};
pub use oracle::{DistributionalSpec, OracleAtom, OracleRule, OracleScript, ScriptedOracle};
pub use remote::{RemoteBackend, RemoteConfig, API_KEY_ENV, BASE_URL_ENV};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(&'static str),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("server error (HTTP {status}) after {attempts} attempt(s)")]
    Server { status: u16, attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no oracle rule matches prompt starting {0:?}")]
    NoRuleMatches(String),
    #[error("prompt is about {estimated} tokens, over the {limit}-token limit")]
    PromptTooLong { estimated: usize, limit: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(String),
    #[error("oracle script: {0}")]
    Script(String),
    #[error("no list items found in {attempts} completion attempt(s)")]
    Unparseable { attempts: u32 },
    #[error("only {got} distinct rationales after {attempts} attempt(s), {needed} needed")]
    InsufficientRationales { got: usize, needed: usize, attempts: u32 },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl LlmError {
    /// Errors that retrying with a different sample cannot fix.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            LlmError::MissingApiKey(_)
                | LlmError::Auth(_)
                | LlmError::PromptTooLong { .. }
                | LlmError::InvalidRequest(_)
                | LlmError::Cache(_)
                | LlmError::Script(_)
                | LlmError::Prompt(_)
        )
    }
}

/// Sampling parameters shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        // Nucleus sampling at temperature 0.9; no top_p value is prescribed,
        // so the full distribution is kept.
        Self { temperature: 0.9, top_p: 1.0, max_tokens: 256 }
    }
}

impl GenerationParams {
    pub fn request(&self, prompt: impl Into<String>, sample_index: u64) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt.into(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            n: 1,
            sample_index,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub n: u32,
    /// Distinguishes repeated draws for the same prompt; part of the cache key.
    pub sample_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationParams::default().request(prompt, 0)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!("temperature {} < 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 || self.n == 0 {
            return Err(LlmError::InvalidRequest("max_tokens and n must be positive".into()));
        }
        Ok(())
    }
}

/// A source of completions. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    /// Identity string recorded in run manifests and cache keys.
    fn id(&self) -> String;

    /// Returns exactly `req.n` completions.
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, LlmError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, LlmError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, LlmError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, LlmError> {
        (**self).generate(req)
    }
}

/// Convenience for the common single-sample case.
pub fn generate_one(backend: &dyn Backend, req: &GenerationRequest) -> Result<String, LlmError> {
    let mut out = backend.generate(req)?;
    if out.is_empty() {
        return Err(LlmError::Malformed("backend returned no completions".into()));
    }
    Ok(out.swap_remove(0))
}

static LIST_ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:\d+[.)]|[-*])\s*(.+?)\s*$").unwrap());

/// Extracts list items from a completion. Accepts `1.`, `1)`, `-` and `*`
/// prefixes; items are lowercased and stripped of trailing punctuation and
/// surrounding quotes.
pub fn parse_list_items(completion: &str) -> Vec<String> {
    completion
        .lines()
        .filter_map(|line| LIST_ITEM.captures(line))
        .map(|c| {
            c[1].trim_matches(|ch: char| {
                matches!(ch, '"' | '\'' | '`' | '.' | ',' | ';' | ':' | '!') || ch.is_whitespace()
            })
            .to_lowercase()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Asks the backend for reasons behind `label` and returns exactly `k`
/// distinct phrases, re-sampling (new `sample_index`) up to `attempts`
/// times while fewer than `k` have been collected.
pub fn top_k_rationales(
    backend: &dyn Backend,
    label: &str,
    template: &PromptTemplate,
    k: usize,
    reason_count: usize,
    params: &GenerationParams,
    attempts: u32,
) -> Result<Vec<String>, LlmError> {
    if template.role() != Role::Ration {
        return Err(LlmError::InvalidRequest(format!("rationales need a ration template, got {}", template.role())));
    }
    if k == 0 {
        return Err(LlmError::InvalidRequest("K must be >= 1".into()));
    }
    let mut bindings = Bindings::new();
    bindings.insert(Placeholder::X, reason_count.to_string());
    bindings.insert(Placeholder::Y, label.to_string());
    let prompt = template.render(&bindings)?;

    let mut found: Vec<String> = Vec::new();
    let attempts = attempts.max(1);
    for attempt in 0..attempts {
        let text = generate_one(backend, &params.request(prompt.clone(), attempt as u64))?;
        for item in parse_list_items(&text) {
            if !found.contains(&item) {
                found.push(item);
            }
        }
        if found.len() >= k {
            found.truncate(k);
            return Ok(found);
        }
    }
    if found.is_empty() {
        Err(LlmError::Unparseable { attempts })
    } else {
        Err(LlmError::InsufficientRationales { got: found.len(), needed: k, attempts })
    }
}
