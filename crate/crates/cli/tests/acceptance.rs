//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p s3-cli --test acceptance -- --nocapture` to see them.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};

use s3_core::dataset::Dataset;
use s3_core::demo::{self, DEMO_SEED};
use s3_core::diversity::{coverage_rate, edit_distance, Point};
use s3_core::ees::EesConfig;
use s3_core::gapsim::{
    mix, optimal_mix_ratio, residual_distribution, simulate_ees_rounds, DiscreteDistribution, MixPolicy,
};
use s3_core::metrics::{exact_match, flops, token_f1, TrainingStage};
use s3_core::prompting::{builtin_templates, Bindings, Field, Placeholder, Role};
use s3_core::synthesis::SynthesisConfig;
use s3_core::trainer::NaiveBayes;
use s3_core::Stage;

type Outcome = Result<String, String>;
type FidelityCase = (&'static str, Role, Vec<(Placeholder, &'static str)>, &'static str);
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want
}

fn flops_reproduction() -> Outcome {
    let zerogen = flops(66e6, 512.0, &[TrainingStage { records: 200e3, epochs: 10.0 }]).map_err(|e| e.to_string())?;
    let s3 = flops(66e6, 512.0, &[51.2e3, 64.0e3, 76.8e3].map(|records| TrainingStage { records, epochs: 8.0 }))
        .map_err(|e| e.to_string())?;
    check(rel(zerogen.per_record_flops, 2.03e11) < 0.005, format!("per record {:e}", zerogen.per_record_flops))?;
    check(rel(zerogen.total, 4.06e17) < 0.005, format!("baseline total {:e}", zerogen.total))?;
    check(rel(s3.total, 3.11e17) < 0.005, format!("total {:e}", s3.total))?;
    Ok(format!("{:.3e} / {:.3e} / {:.3e}", zerogen.per_record_flops, zerogen.total, s3.total))
}

fn dist(p: &[f64]) -> DiscreteDistribution {
    DiscreteDistribution::from_probs(p.to_vec()).unwrap()
}

fn mix_ratio_recovery() -> Outcome {
    let d = dist(&[0.5, 0.5]);
    let s = dist(&[0.8, 0.2]);
    let (add, _) = residual_distribution(&d, &s).map_err(|e| e.to_string())?;
    let (p, tv) = optimal_mix_ratio(&d, &s, &add).map_err(|e| e.to_string())?;
    check((p - 0.375).abs() <= 1e-6, format!("p* = {p}"))?;
    check(tv == 0.0, format!("tv* = {tv}"))?;
    let m = mix(&add, &s, p).map_err(|e| e.to_string())?;
    let err = m.probs().iter().zip(d.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(err <= 1e-12, format!("mixture off by {err:e}"))?;
    Ok(format!("p*={p} tv*={tv}"))
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let t: f64 = raw.iter().sum();
    raw.iter().map(|v| v / t).collect()
}

fn ees_convergence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let n = rng.random_range(2..=8);
        let d = simplex(&mut rng, n);
        let s0 = simplex(&mut rng, n);
        let trace = simulate_ees_rounds(&dist(&d), &dist(&s0), 5, MixPolicy::OptimalP).map_err(|e| e.to_string())?;
        let tvs = trace.tvs();
        for w in tvs.windows(2) {
            check(w[1] <= w[0], format!("instance {inst}: TV rose {} -> {}", w[0], w[1]))?;
            if w[0] > 1e-9 {
                check(w[1] < w[0], format!("instance {inst}: TV stalled at {}", w[0]))?;
            }
        }
        // Optimizer against a 1e-4 grid on the first round.
        let (add, _) = residual_distribution(&dist(&d), &dist(&s0)).map_err(|e| e.to_string())?;
        let (p, t) = optimal_mix_ratio(&dist(&d), &dist(&s0), &add).map_err(|e| e.to_string())?;
        let eval = |p: f64| {
            let m: Vec<f64> = add.probs().iter().zip(&s0).map(|(a, b)| p * a + (1.0 - p) * b).collect();
            tv(&m, &d)
        };
        let (mut gp, mut gt) = (0.0, f64::INFINITY);
        for k in 0..=10_000 {
            let q = k as f64 * 1e-4;
            let v = eval(q);
            if v < gt {
                (gp, gt) = (q, v);
            }
        }
        check((eval(p) - t).abs() <= 1e-12, format!("instance {inst}: reported tv {t} != {}", eval(p)))?;
        check(t <= gt + 1e-6, format!("instance {inst}: optimizer {t} worse than grid {gt}"))?;
        check((p - gp).abs() <= 1e-4 + 1e-6, format!("instance {inst}: p {p} vs grid {gp}"))?;
        worst = worst.max(t - gt);
    }
    Ok(format!("100 instances, optimizer - grid <= {worst:.1e}"))
}

fn run_demo() -> demo::DemoRun {
    let o = demo::demo_oracle(DEMO_SEED);
    let nb = NaiveBayes::new(1.0).unwrap();
    demo::run(DEMO_SEED, &o, &nb, &SynthesisConfig::default(), &EesConfig::default()).unwrap()
}

fn pipeline_bookkeeping() -> Outcome {
    let r = run_demo();
    check(!r.spec.dedup, "demo task must have dedup off")?;
    let e = &r.ees;
    let added: usize = e.added.iter().map(Dataset::len).sum();
    check(e.final_dataset.len() == r.seed.len() + added, "final != seed + added")?;
    for (q, (mis, add)) in e.misclassified.iter().zip(&e.added).enumerate() {
        check(add.len() == mis.len(), format!("round {q}: {} added for {} errors", add.len(), mis.len()))?;
        for ex in add {
            let src = ex.provenance.source_error_id.as_deref().ok_or("added example without source")?;
            let err = mis.iter().find(|m| m.error_id == src).ok_or("source error not found")?;
            check(ex.label() == err.example.label(), "label differs from source error")?;
            check(ex.payload.context() == err.example.payload.context(), "context differs from source error")?;
            check(ex.provenance.stage == Stage::Add && ex.provenance.round as usize == q + 1, "bad provenance")?;
        }
    }
    check(!e.added.is_empty(), "no extrapolation round ran")?;
    Ok(format!(
        "|seed|={} + {:?} = |final|={}",
        r.seed.len(),
        e.added.iter().map(Dataset::len).collect::<Vec<_>>(),
        e.final_dataset.len()
    ))
}

fn gap_closing() -> Outcome {
    let r = run_demo();
    check(r.seed.len() == 200 && r.gold_val.len() == 100 && r.gold_test.len() == 100, "wrong split sizes")?;
    check(r.spec.ees_rounds == 2, "R must be 2")?;
    let (a, b) = (r.seed_test_accuracy(), r.final_test_accuracy());
    check(b - a >= 0.05 - 1e-12, format!("seed-only {a:.2}, after {b:.2}"))?;
    Ok(format!("gold-test accuracy {a:.2} -> {b:.2}"))
}

#[derive(serde::Deserialize)]
struct Golden {
    pred: String,
    gold: String,
    em: u8,
    f1: f64,
}

/// Reference EM/F1 by explicit token lists and a used-mask match.
fn reference(pred: &str, gold: &str) -> (u8, f64) {
    let toks = |s: &str| -> Vec<String> {
        let kept: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
        kept.split_whitespace().filter(|w| !["a", "an", "the"].contains(w)).map(String::from).collect()
    };
    let (p, g) = (toks(pred), toks(gold));
    let em = u8::from(p == g);
    if p.is_empty() || g.is_empty() {
        return (em, if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 });
    }
    let mut used = vec![false; g.len()];
    let mut common = 0.0;
    for t in &p {
        if let Some(j) = (0..g.len()).find(|&j| !used[j] && &g[j] == t) {
            used[j] = true;
            common += 1.0;
        }
    }
    if common == 0.0 {
        return (em, 0.0);
    }
    let (pr, rc) = (common / p.len() as f64, common / g.len() as f64);
    (em, 2.0 * pr * rc / (pr + rc))
}

fn dp_edit(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            cur[j] = (prev[j - 1] + usize::from(a[i - 1] != b[j - 1])).min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn metric_oracles() -> Outcome {
    let golden: Vec<Golden> = include_str!("../../core/tests/fixtures/em_f1_golden.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    check(golden.len() == 50, format!("{} golden cases", golden.len()))?;
    for c in &golden {
        let (em, f1) = reference(&c.pred, &c.gold);
        check(em == c.em && (f1 - c.f1).abs() < 1e-9, format!("reference disagrees with golden on {:?}", c.pred))?;
        check(exact_match(&c.pred, &c.gold) == c.em, format!("EM on {:?} / {:?}", c.pred, c.gold))?;
        check((token_f1(&c.pred, &c.gold) - c.f1).abs() < 1e-9, format!("F1 on {:?} / {:?}", c.pred, c.gold))?;
    }
    check(token_f1("great acting", "acting great") == 1.0, "word order")?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let alphabet: Vec<char> = "abcxyzé ".chars().collect();
    for _ in 0..1000 {
        let mut s = || -> Vec<char> {
            let n = rng.random_range(0..=20);
            (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        let (a, b) = (s(), s());
        let (sa, sb): (String, String) = (a.iter().collect(), b.iter().collect());
        check(edit_distance(&sa, &sb) == dp_edit(&a, &b), format!("edit distance {sa:?} {sb:?}"))?;
    }
    Ok("50 golden cases, 1000 edit-distance pairs".into())
}

fn coverage_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let pts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Point> {
        (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect()
    };
    for set in 0..50 {
        let (ng, ns) = (rng.random_range(1..=200), rng.random_range(1..=200));
        let gold = pts(&mut rng, ng);
        let syn = pts(&mut rng, ns);
        let gamma = rng.random_range(0.0..1.5);
        let brute = gold
            .iter()
            .filter(|g| syn.iter().any(|s| ((g[0] - s[0]).powi(2) + (g[1] - s[1]).powi(2)).sqrt() <= gamma))
            .count() as f64
            / gold.len() as f64;
        let got = coverage_rate(&gold, &syn, gamma).map_err(|e| e.to_string())?;
        check(got == brute, format!("set {set}: {got} vs brute force {brute}"))?;
        let mut last = -1.0;
        for k in 0..=40 {
            let c = coverage_rate(&gold, &syn, k as f64 * 0.1).map_err(|e| e.to_string())?;
            check(c >= last, format!("set {set}: coverage fell at gamma {}", k as f64 * 0.1))?;
            last = c;
        }
    }
    Ok("50 sets exact, monotone over 41 radii".into())
}

fn prompt_fidelity() -> Outcome {
    let render = |ds: &str, role: Role, pairs: &[(Placeholder, &str)]| -> Result<String, String> {
        let t = builtin_templates(ds).map_err(|e| e.to_string())?;
        let tpl = t.templates.get(&role).ok_or(format!("{ds} has no {role:?}"))?;
        let b: Bindings = pairs
            .iter()
            .map(|(k, v)| (*k, if *k == Placeholder::Y { tpl.label_word(v).to_string() } else { v.to_string() }))
            .collect();
        tpl.render(&b).map_err(|e| e.to_string())
    };
    let (x, y) = (Placeholder::X, Placeholder::Y);
    let f = Placeholder::Field;
    let cases: Vec<FidelityCase> = vec![
        (
            "imdb",
            Role::Ration,
            vec![(x, "5"), (y, "negative")],
            "Imagine you are watching a movie; consider 5 reasons that may lead to negative impression of the movie.",
        ),
        (
            "imdb",
            Role::Query1,
            vec![(x, "a weak ending and a confusing plot"), (y, "negative")],
            "Now imagine that you just watched a movie that has a weak ending and a confusing plot. Now you should write a negative review about this movie.",
        ),
        (
            "imdb",
            Role::Mis1,
            vec![(x, "The movie is great"), (y, "positive")],
            "Write a positive movie similar to: \n The movie is great",
        ),
        (
            "qnli",
            Role::Query2,
            vec![(x, "Para."), (y, "entailment")],
            "Given an information paragraph: Para. \n Please ask a question that has answers in the information paragraph",
        ),
        (
            "qnli",
            Role::Mis2,
            vec![(f(Field::Premise), "Para."), (f(Field::Question), "Why?"), (y, "not_entailment")],
            "Given a premise: Para. \n And here is a question: Why? that the answer of question is not in the premise.\nPlease write another question similar to the given question and have answers not in the premise.",
        ),
        (
            "rte",
            Role::Query2,
            vec![(x, "P"), (y, "entailment")],
            "P \nBased on the above description, the following sentence is definitely correct:",
        ),
        (
            "rte",
            Role::Mis2,
            vec![(f(Field::Premise), "P."), (f(Field::Hypothesis), "H."), (y, "not_entailment")],
            "P. \nBased on the above description, the following sentence: H. is definitely wrong. Now write a sentence similar to the given sentence and is definitely wrong based on the given description.",
        ),
        (
            "adqa",
            Role::Query2,
            vec![(f(Field::Context), "Ctx."), (f(Field::Answer), "Ans")],
            "Given a context: Ctx. \nAns is the answer to the following question:",
        ),
        (
            "adqa",
            Role::Mis2,
            vec![(f(Field::Context), "Ctx."), (f(Field::Answer), "Ans"), (f(Field::Question), "Q?")],
            "Given a context: Ctx. \nAns is the answer to: Q?.\nA question that has the same answer in the context is:",
        ),
    ];
    for (ds, role, pairs, want) in &cases {
        let got = render(ds, *role, pairs)?;
        check(&got == want, format!("{ds} {role:?}: got {got:?}"))?;
    }
    Ok(format!("{} templates across 4 datasets", cases.len()))
}

fn s3_demo(dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_s3"))
        .arg("--out-dir")
        .arg(dir)
        .arg("demo")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), format!("s3 demo failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn manifest_without_timestamps(dir: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v.as_object_mut().ok_or("manifest is not an object")?.remove("timestamps");
    Ok(v)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    s3_demo(&a)?;
    s3_demo(&b)?;
    let mut files: Vec<String> = std::fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    files.sort();
    for name in &files {
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).map_err(|e| e.to_string())?);
        check(x == y, format!("{name} differs between runs"))?;
    }
    let ma = manifest_without_timestamps(&a)?;
    check(ma == manifest_without_timestamps(&b)?, "manifests differ outside timestamps")?;
    // The manifest vouches for every file it lists.
    let listed: BTreeMap<String, String> = ma["artifacts"]
        .as_array()
        .ok_or("no artifacts")?
        .iter()
        .map(|x| (x["path"].as_str().unwrap().to_string(), x["sha256"].as_str().unwrap().to_string()))
        .collect();
    for need in ["seed.jsonl", "train.jsonl", "report.json"] {
        check(listed.contains_key(need), format!("manifest does not list {need}"))?;
    }
    for (path, digest) in &listed {
        let bytes = std::fs::read(a.join(path)).map_err(|e| e.to_string())?;
        check(&hex::encode(Sha256::digest(&bytes)) == digest, format!("digest mismatch for {path}"))?;
    }
    Ok(format!("{} files identical, manifest digests verified", files.len()))
}

// Runs without the libtest harness so the verdict lines are always shown.
fn main() {
    let criteria: Vec<Criterion> = vec![
        ("flops reproduction", Duration::from_secs(1), flops_reproduction),
        ("mix-ratio recovery", Duration::from_secs(1), mix_ratio_recovery),
        ("EES convergence property", Duration::from_secs(10), ees_convergence),
        ("pipeline bookkeeping", Duration::from_secs(30), pipeline_bookkeeping),
        ("end-to-end gap closing", Duration::from_secs(60), gap_closing),
        ("metric oracles", Duration::from_secs(5), metric_oracles),
        ("coverage-rate oracle", Duration::from_secs(5), coverage_oracle),
        ("prompt fidelity", Duration::from_secs(1), prompt_fidelity),
        ("determinism", Duration::from_secs(60), determinism),
    ];
    let mut failed = Vec::new();
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let took = start.elapsed();
        let r = r.and_then(|m| if took <= limit { Ok(m) } else { Err(format!("took {took:.2?}, limit {limit:?}")) });
        match r {
            Ok(m) => println!("PASS {name}: {m} ({took:.2?})"),
            Err(m) => {
                println!("FAIL {name}: {m} ({took:.2?})");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
