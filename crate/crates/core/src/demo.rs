//! A fully offline scenario for trying the pipeline end to end.
//!
//! Movie reviews live in a small procedural space: each review talks about
//! one aspect (acting, plot, visuals, music) with aspect- and
//! sentiment-specific adjectives, while the nouns and filler words are shared
//! by both sentiments. Real reviews cover all four aspects evenly. The
//! scripted LLM, asked for a negative review, only ever talks about plot and
//! visuals, so a classifier trained on its seed data has never seen negative
//! acting or music vocabulary and calls those reviews positive. Asking for
//! reviews "similar to" the misclassified ones fills exactly that hole.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, DatasetBuilder, Payload, Provenance, Stage};
use crate::ees::{run_ees, EesConfig, EesOutcome};
use crate::llm::{DistributionalSpec, OracleAtom, OracleRule, OracleScript, ScriptedOracle};
use crate::prompting::{builtin, BuiltinDataset};
use crate::rng::{stream, stream_seed};
use crate::synthesis::{synthesize_rationales, synthesize_seed, RationaleSet, SynthesisConfig};
use crate::task::{TaskKind, TaskSpec};
use crate::trainer::Trainer;
use crate::Error;

pub const DEMO_SEED: u64 = 42;
pub const GOLD_VAL_SIZE: usize = 100;
pub const GOLD_TEST_SIZE: usize = 100;

const OPENERS: [&str; 5] = ["", "honestly, ", "to be fair, ", "overall ", "i thought "];

struct Aspect {
    name: &'static str,
    nouns: [&'static str; 5],
    positive: [&'static str; 3],
    negative: [&'static str; 3],
}

const ASPECTS: [Aspect; 4] = [
    Aspect {
        name: "acting",
        nouns: ["cast", "lead actor", "performances", "supporting cast", "casting"],
        positive: ["superb", "magnetic", "heartfelt"],
        negative: ["wooden", "stilted", "lifeless"],
    },
    Aspect {
        name: "plot",
        nouns: ["story", "script", "twist", "pacing", "ending"],
        positive: ["gripping", "clever", "inventive"],
        negative: ["predictable", "muddled", "tedious"],
    },
    Aspect {
        name: "visuals",
        nouns: ["cinematography", "effects", "camera work", "set design", "lighting"],
        positive: ["stunning", "gorgeous", "breathtaking"],
        negative: ["murky", "cheap", "garish"],
    },
    Aspect {
        name: "music",
        nouns: ["soundtrack", "score", "songs", "sound mix", "theme"],
        positive: ["soaring", "haunting", "memorable"],
        negative: ["grating", "forgettable", "jarring"],
    },
];

pub fn demo_task() -> TaskSpec {
    let b = builtin(BuiltinDataset::Imdb);
    TaskSpec {
        name: "imdb-demo".into(),
        kind: TaskKind::SingleTextClassification,
        labels: b.labels,
        templates: b.templates,
        rationale_count: 3,
        rationales_per_query: 2,
        reason_count: None,
        seed_size: 200,
        ees_rounds: 2,
        qa_f1_threshold: 0.5,
        dedup: false,
    }
}

/// Every review in the space, grouped by label then aspect.
pub fn atoms() -> Vec<OracleAtom> {
    let mut out = Vec::new();
    for (label, pick) in [("positive", true), ("negative", false)] {
        for a in &ASPECTS {
            let adj = if pick { &a.positive } else { &a.negative };
            for opener in OPENERS {
                for noun in a.nouns {
                    for i in 0..3 {
                        for j in 0..3 {
                            if i != j {
                                out.push(OracleAtom {
                                    text: format!("{opener}the {noun} felt {} and {}.", adj[i], adj[j]),
                                    label: label.into(),
                                    cluster: a.name.into(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn demo_script(seed: u64) -> OracleScript {
    let lines = |xs: &[&str]| {
        vec![xs.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect::<Vec<_>>().join("\n")]
    };
    let mut query_weights = BTreeMap::new();
    query_weights
        .insert("positive".to_string(), ASPECTS.iter().map(|a| (a.name.to_string(), 1.0)).collect::<BTreeMap<_, _>>());
    query_weights
        .insert("negative".to_string(), BTreeMap::from([("plot".to_string(), 0.8), ("visuals".to_string(), 0.2)]));
    OracleScript {
        rules: vec![
            OracleRule::contains(
                "positive impression",
                lines(&["great acting", "an intriguing plot", "beautiful cinematography"]),
            ),
            OracleRule::contains(
                "negative impression",
                lines(&["a confusing plot", "cheap visual effects", "a weak ending"]),
            ),
        ],
        distributional: Some(DistributionalSpec { atoms: atoms(), query_weights, similar_marker: "similar to".into() }),
        rng_seed: stream_seed(seed, "oracle"),
    }
}

pub fn demo_oracle(seed: u64) -> ScriptedOracle {
    ScriptedOracle::new(demo_script(seed)).expect("demo script is valid")
}

/// Real reviews: uniform label, uniform aspect, uniform review.
pub fn gold_split(spec: &TaskSpec, n: usize, stage: Stage, rng: &mut ChaCha8Rng) -> Dataset {
    let all = atoms();
    let mut groups: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for a in &all {
        groups.entry((a.label.as_str(), a.cluster.as_str())).or_default().push(&a.text);
    }
    let mut b = DatasetBuilder::for_spec(spec);
    for _ in 0..n {
        let label = &spec.labels[rng.random_range(0..spec.labels.len())];
        let aspect = ASPECTS[rng.random_range(0..ASPECTS.len())].name;
        let pool = &groups[&(label.as_str(), aspect)];
        let x = pool[rng.random_range(0..pool.len())].to_string();
        b.push(Payload::TextLabel { x, y: label.clone() }, Provenance::gold(stage)).expect("valid example");
    }
    b.finish()
}

pub struct DemoRun {
    pub spec: TaskSpec,
    pub rationales: RationaleSet,
    pub seed: Dataset,
    pub gold_val: Dataset,
    pub gold_test: Dataset,
    pub ees: EesOutcome,
}

impl DemoRun {
    /// Gold-test accuracy of the model trained on seed data only.
    pub fn seed_test_accuracy(&self) -> f64 {
        self.ees.reports[0].test.as_ref().and_then(|t| t.accuracy).unwrap_or(0.0)
    }

    /// Gold-test accuracy of the model trained on the final dataset.
    pub fn final_test_accuracy(&self) -> f64 {
        self.ees.reports.last().and_then(|r| r.test.as_ref()).and_then(|t| t.accuracy).unwrap_or(0.0)
    }
}

/// Runs rationales, seed synthesis and the extrapolation loop on the demo
/// task with the scripted oracle.
pub fn run(
    seed: u64,
    backend: &dyn crate::llm::Backend,
    trainer: &dyn Trainer,
    synth: &SynthesisConfig,
    ees: &EesConfig,
) -> Result<DemoRun, Error> {
    let spec = demo_task();
    let gold_val = gold_split(&spec, GOLD_VAL_SIZE, Stage::GoldVal, &mut stream(seed, "demo.gold_val"));
    let gold_test = gold_split(&spec, GOLD_TEST_SIZE, Stage::GoldTest, &mut stream(seed, "demo.gold_test"));
    let rationales = synthesize_rationales(&spec, backend, synth)?;
    let seed_data = synthesize_seed(&spec, &rationales, backend, &mut stream(seed, "synthesis"), synth)?;
    let outcome = run_ees(&spec, &seed_data, &gold_val, Some(&gold_test), trainer, backend, ees)?;
    Ok(DemoRun { spec, rationales, seed: seed_data, gold_val, gold_test, ees: outcome })
}
