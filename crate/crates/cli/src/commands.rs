use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::index::sample;
use serde::Serialize;
use serde_json::{json, Value};

use s3_core::dataset::{load_dataset_as, write_dataset, Dataset, Stage};
use s3_core::demo;
use s3_core::diversity::{
    coords_to_jsonl, coverage_rate, default_gamma, project_2d, quality_report, EmbeddingSet, HashedEmbedder, Point,
    Projection,
};
use s3_core::ees::{run_ees, EesConfig, EesOutcome};
use s3_core::gapsim::Scenario;
use s3_core::llm::{Backend, CachedBackend, GenerationParams, RemoteBackend, RemoteConfig, ScriptedOracle};
use s3_core::metrics::{evaluate, flops, TrainingStage};
use s3_core::rng::{stream, stream_seed};
use s3_core::synthesis::{
    synthesize_rationales, synthesize_seed, synthesize_seed_conditional, ContextPool, ContextSampling, SynthesisConfig,
};
use s3_core::task::load_task_spec;
use s3_core::trainer::{Predicted, PredictionSet, Trainer, TrainerBackend, TrainerConfig};
use s3_core::{Error, TaskKind, TaskSpec};

use crate::manifest::Recorder;
use crate::{
    BackendKind, Cli, Command, CoverageArgs, DemoArgs, DiversityCommand, EesArgs, EvaluateArgs, FlopsArgs, GapArgs,
    LlmArgs, QualityArgs, SynthesizeArgs, TrainerArgs, TrainerKind,
};

pub fn run(cli: &Cli) -> Result<(), Error> {
    let mut config = serde_json::to_value(&cli.command).map_err(|e| Error::Internal(e.to_string()))?;
    config["parallel"] = cli.parallel.into();
    let name = match &cli.command {
        Command::SynthesizeSeed(_) => "synthesize-seed",
        Command::RunEes(_) => "run-ees",
        Command::Evaluate(_) => "evaluate",
        Command::Diversity(DiversityCommand::Quality(_)) => "diversity quality",
        Command::Diversity(DiversityCommand::Coverage(_)) => "diversity coverage",
        Command::SimulateGap(_) => "simulate-gap",
        Command::Flops(_) => "flops",
        Command::Demo(_) => "demo",
    };
    let mut rec = Recorder::new(name, config, &cli.out_dir);
    match &cli.command {
        Command::SynthesizeSeed(a) => synthesize(a, cli.parallel, &mut rec)?,
        Command::RunEes(a) => ees(a, cli.parallel, &mut rec)?,
        Command::Evaluate(a) => evaluate_cmd(a, &mut rec)?,
        Command::Diversity(DiversityCommand::Quality(a)) => quality(a, &mut rec)?,
        Command::Diversity(DiversityCommand::Coverage(a)) => coverage(a, &mut rec)?,
        Command::SimulateGap(a) => gap(a, &mut rec)?,
        Command::Flops(a) => flops_cmd(a, &mut rec)?,
        Command::Demo(a) => demo_cmd(a, cli.parallel, &mut rec)?,
    }
    rec.finish()?;
    Ok(())
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn dataset_bytes(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf).expect("writing to memory");
    buf
}

struct Llm {
    backend: Arc<dyn Backend>,
    cache: Option<Arc<CachedBackend<Arc<dyn Backend>>>>,
}

impl Llm {
    fn build(base: Arc<dyn Backend>, cache: Option<&Path>) -> Result<Self, Error> {
        match cache {
            None => Ok(Self { backend: base, cache: None }),
            Some(path) => {
                let c = Arc::new(CachedBackend::open(base, path)?);
                Ok(Self { backend: c.clone(), cache: Some(c) })
            }
        }
    }

    fn from_args(a: &LlmArgs) -> Result<Self, Error> {
        let base: Arc<dyn Backend> = match a.backend {
            BackendKind::Scripted => {
                let path = a
                    .oracle
                    .as_ref()
                    .ok_or_else(|| Error::Config("the scripted backend needs --oracle <script.json>".into()))?;
                Arc::new(ScriptedOracle::from_json(&read(path)?)?)
            }
            BackendKind::Remote => {
                let mut cfg = RemoteConfig::from_env(a.model.clone())?;
                cfg.max_retries = a.max_retries;
                cfg.timeout = Duration::from_secs(a.timeout_secs);
                cfg.max_prompt_tokens = (a.max_prompt_tokens > 0).then_some(a.max_prompt_tokens);
                Arc::new(RemoteBackend::new(cfg))
            }
        };
        Self::build(base, a.cache.as_deref())
    }

    fn record(&self, rec: &mut Recorder) {
        rec.backend(self.backend.id());
        if let Some(c) = &self.cache {
            rec.cache(serde_json::to_value(c.stats()).expect("plain struct"));
        }
    }
}

fn params(a: &LlmArgs) -> GenerationParams {
    GenerationParams { temperature: a.temperature, top_p: a.top_p, max_tokens: a.max_tokens }
}

fn trainer(a: &TrainerArgs) -> Result<Box<dyn Trainer>, Error> {
    let hyperparameters: BTreeMap<String, Value> = match &a.trainer_config {
        Some(p) => serde_json::from_str(&read(p)?)
            .map_err(|e| Error::Config(format!("{}: expected a JSON object: {e}", p.display())))?,
        None => BTreeMap::new(),
    };
    let cfg = TrainerConfig {
        backend: match a.kind {
            TrainerKind::BuiltinNb => TrainerBackend::BuiltinNb,
            TrainerKind::External => TrainerBackend::External,
        },
        smoothing: a.smoothing,
        external_cmd: a.trainer_cmd.as_ref().map(|c| c.split_whitespace().map(str::to_string).collect()),
        hyperparameters,
    };
    Ok(cfg.build()?)
}

fn synthesize(a: &SynthesizeArgs, parallel: usize, rec: &mut Recorder) -> Result<(), Error> {
    let spec = load_task_spec(&a.task)?;
    let llm = Llm::from_args(&a.llm)?;
    let cfg = SynthesisConfig {
        params: params(&a.llm),
        parallel,
        retry_budget: a.retry_budget,
        balance: a.balance,
        context_sampling: if a.epoch_contexts { ContextSampling::Epoch } else { ContextSampling::WithReplacement },
        strip_echo: !a.no_echo_strip,
        ..SynthesisConfig::default()
    };
    rec.seed("master", a.seed);
    rec.seed("synthesis", stream_seed(a.seed, "synthesis"));
    let mut rng = stream(a.seed, "synthesis");
    let seed = if spec.kind == TaskKind::SingleTextClassification {
        if a.contexts.is_some() {
            log::warn!("--contexts is ignored for single-text tasks");
        }
        let rations = synthesize_rationales(&spec, llm.backend.as_ref(), &cfg)?;
        rec.write_json(Path::new("rationales.json"), &rations)?;
        synthesize_seed(&spec, &rations, llm.backend.as_ref(), &mut rng, &cfg)?
    } else {
        let path = a.contexts.as_ref().ok_or_else(|| Error::Config(format!("{} tasks need --contexts", spec.kind)))?;
        let pool = ContextPool::load(path)?;
        synthesize_seed_conditional(&spec, &pool, llm.backend.as_ref(), &mut rng, &cfg)?
    };
    rec.write(&a.out, &dataset_bytes(&seed))?;
    llm.record(rec);
    println!("{} seed examples -> {}", seed.len(), rec.path(&a.out).display());
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    task: &'a str,
    stop: s3_core::ees::StopReason,
    seed_size: usize,
    final_size: usize,
    added: Vec<usize>,
    rounds: &'a [s3_core::ees::RoundReport],
}

/// Writes the per-round error and addition sets, the final dataset and the
/// report.
fn write_ees_outputs(
    spec: &TaskSpec,
    seed: &Dataset,
    out: &EesOutcome,
    train_path: &Path,
    report_path: &Path,
    rec: &mut Recorder,
) -> Result<(), Error> {
    for (q, (mis, add)) in out.misclassified.iter().zip(&out.added).enumerate() {
        rec.write(Path::new(&format!("mis_round{q}.jsonl")), &dataset_bytes(&mis.to_dataset(spec)))?;
        rec.write(Path::new(&format!("add_round{}.jsonl", q + 1)), &dataset_bytes(add))?;
    }
    rec.write(train_path, &dataset_bytes(&out.final_dataset))?;
    let report = Report {
        task: &spec.name,
        stop: out.stop,
        seed_size: seed.len(),
        final_size: out.final_dataset.len(),
        added: out.added.iter().map(Dataset::len).collect(),
        rounds: &out.reports,
    };
    rec.write_json(report_path, &report)?;
    rec.timestamp("round_wall_ms", out.reports.iter().map(|r| r.wall_time_ms as u64).collect::<Vec<_>>().into());
    Ok(())
}

fn ees(a: &EesArgs, parallel: usize, rec: &mut Recorder) -> Result<(), Error> {
    let spec = load_task_spec(&a.task)?;
    let seed = load_dataset_as(&a.seed, &spec, Stage::Seed)?;
    let val = load_dataset_as(&a.gold_val, &spec, Stage::GoldVal)?;
    let test = a.gold_test.as_ref().map(|p| load_dataset_as(p, &spec, Stage::GoldTest)).transpose()?;
    let llm = Llm::from_args(&a.llm)?;
    let tr = trainer(&a.trainer)?;
    let cfg = EesConfig {
        rounds: a.rounds.unwrap_or(spec.ees_rounds),
        expansion: a.expansion,
        params: params(&a.llm),
        parallel,
        attempts: a.attempts,
        min_improvement: (!a.no_convergence).then_some(a.min_improvement),
        strip_echo: true,
    };
    let out = run_ees(&spec, &seed, &val, test.as_ref(), tr.as_ref(), llm.backend.as_ref(), &cfg)?;
    write_ees_outputs(&spec, &seed, &out, &a.out, &a.report, rec)?;
    llm.record(rec);
    rec.trainer(tr.name());
    println!(
        "{} rounds, {} -> {} examples ({:?}) -> {}",
        out.added.len(),
        seed.len(),
        out.final_dataset.len(),
        out.stop,
        rec.path(&a.out).display()
    );
    Ok(())
}

/// Reorders predictions to the gold order by id.
fn align(preds: PredictionSet, gold: &Dataset) -> Result<PredictionSet, Error> {
    let mut by_id: BTreeMap<String, Predicted> = BTreeMap::new();
    for p in preds.items() {
        if by_id.insert(p.id.clone(), p.clone()).is_some() {
            return Err(Error::Config(format!("duplicate prediction for id `{}`", p.id)));
        }
    }
    let items = gold
        .iter()
        .map(|g| by_id.remove(&g.id).ok_or_else(|| Error::Config(format!("no prediction for gold id `{}`", g.id))))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::Config(format!("prediction for unknown id `{extra}`")));
    }
    Ok(PredictionSet::new(items))
}

fn evaluate_cmd(a: &EvaluateArgs, rec: &mut Recorder) -> Result<(), Error> {
    let spec = load_task_spec(&a.task)?;
    let gold = load_dataset_as(&a.gold, &spec, Stage::GoldTest)?;
    let preds = match (&a.pred, &a.train) {
        (Some(p), _) => {
            let raw =
                PredictionSet::from_jsonl(&read(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            align(raw, &gold)?
        }
        (None, Some(t)) => {
            let train = load_dataset_as(t, &spec, Stage::Seed)?;
            let tr = trainer(&a.trainer)?;
            rec.trainer(tr.name());
            let preds = tr.train(&spec, &train)?.predict(&gold)?;
            rec.write(Path::new("predictions.jsonl"), preds.to_jsonl().as_bytes())?;
            preds
        }
        (None, None) => return Err(Error::Config("give --pred or --train".into())),
    };
    let m = evaluate(&preds, &gold)?;
    rec.write_json(&a.out, &m)?;
    println!("{}", serde_json::to_string(&m).expect("plain struct"));
    Ok(())
}

fn quality(a: &QualityArgs, rec: &mut Recorder) -> Result<(), Error> {
    let spec = load_task_spec(&a.task)?;
    let mis = load_dataset_as(&a.mis, &spec, Stage::GoldVal)?;
    let add = load_dataset_as(&a.add, &spec, Stage::Add)?;
    let emb = match &a.embeddings {
        Some(p) => EmbeddingSet::from_jsonl(&read(p)?)?,
        None => {
            let e = HashedEmbedder::default();
            let mut set = e.embed_dataset(&mis);
            set.extend(&e.embed_dataset(&add))?;
            set
        }
    };
    let r = quality_report(&mis, &add, &emb)?;
    rec.write_json(&a.out, &r)?;
    let csv = format!(
        "n_pairs,avg_cos_sim,avg_edit_dist,avg_len_mis,avg_len_add\n{},{},{},{},{}\n",
        r.n_pairs, r.avg_cos_sim, r.avg_edit_dist, r.avg_len_mis, r.avg_len_add
    );
    rec.write(&a.out.with_extension("csv"), csv.as_bytes())?;
    println!("{}", serde_json::to_string(&r).expect("plain struct"));
    Ok(())
}

fn subsample(d: &Dataset, n: Option<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Dataset {
    match n {
        Some(n) if n < d.len() => {
            let mut idx = sample(rng, d.len(), n).into_vec();
            idx.sort_unstable();
            d.select(&idx)
        }
        _ => d.clone(),
    }
}

fn coverage(a: &CoverageArgs, rec: &mut Recorder) -> Result<(), Error> {
    let spec = load_task_spec(&a.task)?;
    let mut rng = stream(a.seed, "diversity");
    rec.seed("master", a.seed);
    let gold = subsample(&load_dataset_as(&a.gold, &spec, Stage::GoldTest)?, a.sample, &mut rng);
    let syn = subsample(&load_dataset_as(&a.syn, &spec, Stage::Seed)?, a.sample, &mut rng);
    // Gold and synthetic ids may coincide, so the joint set is keyed by
    // "<set>:<id>".
    let key = |set: &str, id: &str| format!("{set}:{id}");
    let points: BTreeMap<String, Point> = match &a.coords {
        Some(p) => {
            let coords = s3_core::diversity::load_coords(&read(p)?)?;
            let mut out = BTreeMap::new();
            for (set, d) in [("gold", &gold), ("syn", &syn)] {
                for ex in d {
                    let pt = coords
                        .get(&ex.id)
                        .ok_or_else(|| s3_core::diversity::DiversityError::MissingCoords(ex.id.clone()))?;
                    out.insert(key(set, &ex.id), *pt);
                }
            }
            out
        }
        None => {
            let given =
                a.embeddings.as_ref().map(|p| read(p).and_then(|t| Ok(EmbeddingSet::from_jsonl(&t)?))).transpose()?;
            let e = HashedEmbedder::default();
            let mut joint = EmbeddingSet::new();
            for (set, d) in [("gold", &gold), ("syn", &syn)] {
                for ex in d {
                    let v = match &given {
                        Some(g) => g
                            .get(&ex.id)
                            .ok_or_else(|| s3_core::diversity::DiversityError::MissingEmbedding(ex.id.clone()))?
                            .to_vec(),
                        None => e.embed(ex.payload.target_text()),
                    };
                    joint.insert(key(set, &ex.id), v)?;
                }
            }
            project_2d(&joint, Projection::Pca)?
        }
    };
    let pts = |set: &str, d: &Dataset| d.iter().map(|ex| points[&key(set, &ex.id)]).collect::<Vec<_>>();
    let (g, s) = (pts("gold", &gold), pts("syn", &syn));
    let gamma = match a.gamma {
        Some(v) => v,
        None => default_gamma(&g)?,
    };
    let rate = coverage_rate(&g, &s, gamma)?;
    let r = json!({
        "coverage_rate": rate,
        "gamma": gamma,
        "gamma_source": if a.gamma.is_some() { "given" } else { "median_gold_nn" },
        "n_gold": g.len(),
        "n_syn": s.len(),
        "projection": if a.coords.is_some() { "external" } else { "pca" },
    });
    rec.write_json(&a.out, &r)?;
    let mut csv = String::from("set,id,x,y\n");
    for (k, p) in &points {
        let (set, id) = k.split_once(':').expect("keyed above");
        csv.push_str(&format!("{set},{id},{},{}\n", p[0], p[1]));
    }
    rec.write(&a.out.with_extension("csv"), csv.as_bytes())?;
    rec.write(Path::new("points.jsonl"), coords_to_jsonl(&points).as_bytes())?;
    println!("{r}");
    Ok(())
}

fn gap(a: &GapArgs, rec: &mut Recorder) -> Result<(), Error> {
    let text = read(&a.scenario)?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.scenario.display())))?;
    let trace = scenario.run()?;
    rec.write(&a.out, trace.to_csv().as_bytes())?;
    rec.write_json(&a.out.with_extension("json"), &trace)?;
    for r in &trace.rounds {
        println!("round {}: tv={:.6e} p={:.6}", r.round, r.tv, r.p_used);
    }
    Ok(())
}

/// Parses counts like `200000`, `200k`, `51.2k`, `1.5m`, `66e6`.
fn parse_count(s: &str) -> Result<f64, Error> {
    let t = s.trim().to_ascii_lowercase();
    let (num, mult) = match t.strip_suffix('k') {
        Some(n) => (n, 1e3),
        None => match t.strip_suffix('m') {
            Some(n) => (n, 1e6),
            None => (t.as_str(), 1.0),
        },
    };
    num.parse::<f64>().map(|v| v * mult).map_err(|_| Error::Config(format!("not a number: `{s}`")))
}

fn flops_cmd(a: &FlopsArgs, rec: &mut Recorder) -> Result<(), Error> {
    let stages = a
        .stages
        .iter()
        .map(|s| {
            let (r, e) =
                s.split_once(':').ok_or_else(|| Error::Config(format!("stage `{s}` is not RECORDS:EPOCHS")))?;
            Ok(TrainingStage { records: parse_count(r)?, epochs: parse_count(e)? })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let r = flops(a.params, a.seq_len, &stages)?;
    if let Some(out) = &a.out {
        rec.write_json(out, &r)?;
    }
    println!("{}", serde_json::to_string_pretty(&r).expect("plain struct"));
    Ok(())
}

fn demo_cmd(a: &DemoArgs, parallel: usize, rec: &mut Recorder) -> Result<(), Error> {
    let script = demo::demo_script(a.seed);
    let oracle: Arc<dyn Backend> = Arc::new(ScriptedOracle::new(script.clone())?);
    let llm = Llm::build(oracle, a.cache.as_deref())?;
    let tr = s3_core::trainer::NaiveBayes::new(1.0)?;
    let synth = SynthesisConfig { parallel, ..SynthesisConfig::default() };
    let ees_cfg = EesConfig { rounds: a.rounds, expansion: a.expansion, parallel, ..EesConfig::default() };
    rec.seed("master", a.seed);
    for s in ["oracle", "synthesis", "demo.gold_val", "demo.gold_test"] {
        rec.seed(s, stream_seed(a.seed, s));
    }
    let run = demo::run(a.seed, llm.backend.as_ref(), &tr, &synth, &ees_cfg)?;

    rec.write(Path::new("task.json"), (run.spec.to_json() + "\n").as_bytes())?;
    rec.write_json(Path::new("oracle.json"), &script)?;
    rec.write(Path::new("gold_val.jsonl"), &dataset_bytes(&run.gold_val))?;
    rec.write(Path::new("gold_test.jsonl"), &dataset_bytes(&run.gold_test))?;
    rec.write_json(Path::new("rationales.json"), &run.rationales)?;
    rec.write(Path::new("seed.jsonl"), &dataset_bytes(&run.seed))?;
    write_ees_outputs(&run.spec, &run.seed, &run.ees, Path::new("train.jsonl"), Path::new("report.json"), rec)?;
    llm.record(rec);
    rec.trainer(tr.name());
    println!(
        "seed {} -> final {} examples; gold-test accuracy {:.2} -> {:.2} ({:?})",
        run.seed.len(),
        run.ees.final_dataset.len(),
        run.seed_test_accuracy(),
        run.final_test_accuracy(),
        run.ees.stop
    );
    println!("outputs in {}", PathBuf::from(rec.out_dir()).display());
    Ok(())
}
