//! Offline stand-in for a language model.
//!
//! An [`OracleScript`] has two layers. Rules are tried first, in order: a
//! rule whose substring (or regex) matches the prompt answers with its
//! response list, cycling by sample index. When no rule matches and a
//! distributional section is present, the oracle samples an atom:
//!
//! * the requested label is the longest atom label appearing as a whole
//!   word in the prompt;
//! * if the prompt contains the similarity marker (default `"similar to"`)
//!   and quotes one of the atoms verbatim, the answer is drawn uniformly
//!   from the other atoms of that label in the quoted atom's cluster;
//! * otherwise a cluster is drawn from the label's `query_weights` and an
//!   atom uniformly from it.
//!
//! Every draw is seeded from `(rng_seed, prompt, sample index)`, so outputs
//! do not depend on call order or concurrency.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, GenerationRequest, LlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub responses: Vec<String>,
}

impl OracleRule {
    pub fn contains(needle: impl Into<String>, responses: Vec<String>) -> Self {
        Self { contains: Some(needle.into()), pattern: None, responses }
    }

    pub fn pattern(re: impl Into<String>, responses: Vec<String>) -> Self {
        Self { contains: None, pattern: Some(re.into()), responses }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAtom {
    pub text: String,
    pub label: String,
    pub cluster: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionalSpec {
    pub atoms: Vec<OracleAtom>,
    /// label -> cluster -> weight, for prompts without an exemplar.
    /// Labels missing here sample uniformly over their atoms.
    #[serde(default)]
    pub query_weights: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default = "default_marker")]
    pub similar_marker: String,
}

fn default_marker() -> String {
    "similar to".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScript {
    #[serde(default)]
    pub rules: Vec<OracleRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributional: Option<DistributionalSpec>,
    #[serde(default)]
    pub rng_seed: u64,
}

enum Matcher {
    Contains(String),
    Pattern(Regex),
}

struct CompiledRule {
    matcher: Matcher,
    responses: Vec<String>,
}

struct LabelAtoms {
    label: String,
    word: Regex,
    /// cluster name -> atom indices
    clusters: BTreeMap<String, Vec<usize>>,
    query: Option<(Vec<String>, WeightedIndex<f64>)>,
}

struct Compiled {
    atoms: Vec<OracleAtom>,
    /// sorted by label length, longest first
    labels: Vec<LabelAtoms>,
    marker: String,
}

pub struct ScriptedOracle {
    script: OracleScript,
    rules: Vec<CompiledRule>,
    dist: Option<Compiled>,
    calls: AtomicU64,
}

impl ScriptedOracle {
    pub fn new(script: OracleScript) -> Result<Self, LlmError> {
        if script.rules.is_empty() && script.distributional.is_none() {
            return Err(LlmError::Script("needs at least one rule or a distributional section".into()));
        }
        let mut rules = Vec::with_capacity(script.rules.len());
        for (i, r) in script.rules.iter().enumerate() {
            let matcher = match (&r.contains, &r.pattern) {
                (Some(s), None) => Matcher::Contains(s.clone()),
                (None, Some(p)) => {
                    Matcher::Pattern(Regex::new(p).map_err(|e| LlmError::Script(format!("rule {i}: {e}")))?)
                }
                _ => return Err(LlmError::Script(format!("rule {i}: set exactly one of `contains`, `pattern`"))),
            };
            if r.responses.is_empty() {
                return Err(LlmError::Script(format!("rule {i}: empty response list")));
            }
            rules.push(CompiledRule { matcher, responses: r.responses.clone() });
        }
        let dist = script.distributional.as_ref().map(compile_dist).transpose()?;
        Ok(Self { script, rules, dist, calls: AtomicU64::new(0) })
    }

    pub fn from_json(json: &str) -> Result<Self, LlmError> {
        let script: OracleScript = serde_json::from_str(json).map_err(|e| LlmError::Script(e.to_string()))?;
        Self::new(script)
    }

    pub fn script(&self) -> &OracleScript {
        &self.script
    }

    /// Number of `generate` calls served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn sample(&self, prompt: &str, sample: u64) -> Result<String, LlmError> {
        for r in &self.rules {
            let hit = match &r.matcher {
                Matcher::Contains(s) => prompt.contains(s.as_str()),
                Matcher::Pattern(re) => re.is_match(prompt),
            };
            if hit {
                return Ok(r.responses[(sample % r.responses.len() as u64) as usize].clone());
            }
        }
        let Some(d) = &self.dist else {
            return Err(no_match(prompt));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(self.script.rng_seed, prompt, sample));

        let exemplar = if prompt.contains(d.marker.as_str()) {
            d.atoms
                .iter()
                .enumerate()
                .filter(|(_, a)| !a.text.is_empty() && prompt.contains(a.text.as_str()))
                .max_by_key(|(_, a)| a.text.len())
                .map(|(i, _)| i)
        } else {
            None
        };
        let scan = match exemplar {
            Some(i) => prompt.replacen(d.atoms[i].text.as_str(), " ", 1),
            None => prompt.to_string(),
        };
        let label = d
            .labels
            .iter()
            .find(|l| l.word.is_match(&scan))
            .or_else(|| exemplar.and_then(|i| d.labels.iter().find(|l| l.label == d.atoms[i].label)))
            .ok_or_else(|| no_match(prompt))?;

        if let Some(ex) = exemplar {
            if let Some(pool) = label.clusters.get(&d.atoms[ex].cluster) {
                let others: Vec<usize> =
                    pool.iter().copied().filter(|&i| d.atoms[i].text != d.atoms[ex].text).collect();
                let pool = if others.is_empty() { pool } else { &others };
                return Ok(d.atoms[pool[rng.random_range(0..pool.len())]].text.clone());
            }
        }
        let cluster = match &label.query {
            Some((names, w)) => &label.clusters[&names[w.sample(&mut rng)]],
            None => {
                let all: Vec<&Vec<usize>> = label.clusters.values().collect();
                let total: usize = all.iter().map(|v| v.len()).sum();
                let mut k = rng.random_range(0..total);
                let mut chosen = all[0];
                for v in all {
                    if k < v.len() {
                        chosen = v;
                        break;
                    }
                    k -= v.len();
                }
                chosen
            }
        };
        Ok(d.atoms[cluster[rng.random_range(0..cluster.len())]].text.clone())
    }
}

fn no_match(prompt: &str) -> LlmError {
    LlmError::NoRuleMatches(prompt.chars().take(60).collect())
}

fn draw_seed(seed: u64, prompt: &str, sample: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample.to_le_bytes());
    h.update(prompt.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn compile_dist(d: &DistributionalSpec) -> Result<Compiled, LlmError> {
    if d.atoms.is_empty() {
        return Err(LlmError::Script("distributional section has no atoms".into()));
    }
    let mut by_label: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (i, a) in d.atoms.iter().enumerate() {
        by_label.entry(a.label.clone()).or_default().entry(a.cluster.clone()).or_default().push(i);
    }
    for l in d.query_weights.keys() {
        if !by_label.contains_key(l) {
            return Err(LlmError::Script(format!("query_weights names label `{l}` with no atoms")));
        }
    }
    let mut labels = Vec::new();
    for (label, clusters) in by_label {
        let query = match d.query_weights.get(&label) {
            None => None,
            Some(ws) => {
                let mut names = Vec::new();
                let mut weights = Vec::new();
                for (c, &w) in ws {
                    if !(w >= 0.0) || !w.is_finite() {
                        return Err(LlmError::Script(format!("weight for {label}/{c} must be finite and >= 0")));
                    }
                    if !clusters.contains_key(c) {
                        if w > 0.0 {
                            return Err(LlmError::Script(format!("cluster `{c}` has no atoms labelled `{label}`")));
                        }
                        continue;
                    }
                    names.push(c.clone());
                    weights.push(w);
                }
                let wi = WeightedIndex::new(&weights)
                    .map_err(|e| LlmError::Script(format!("weights for `{label}` not normalizable: {e}")))?;
                Some((names, wi))
            }
        };
        let word =
            Regex::new(&format!(r"\b{}\b", regex::escape(&label))).map_err(|e| LlmError::Script(e.to_string()))?;
        labels.push(LabelAtoms { label, word, clusters, query });
    }
    labels.sort_by(|a, b| b.label.len().cmp(&a.label.len()).then(a.label.cmp(&b.label)));
    Ok(Compiled { atoms: d.atoms.clone(), labels, marker: d.similar_marker.clone() })
}

impl Backend for ScriptedOracle {
    fn id(&self) -> String {
        let digest = crate::text::sha256_hex(serde_json::to_vec(&self.script).unwrap_or_default());
        format!("scripted-oracle:{}", &digest[..12])
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, LlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        req.validate()?;
        (0..req.n as u64).map(|j| self.sample(&req.prompt, req.sample_index + j)).collect()
    }
}
