use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use clap::Parser;
use evstream_cli::{run, Cli};
use evstream_core::build::{build_dataset, Dataset, PREPROCESSING_FILE};
use evstream_core::config::{
    load_dataset_config, DependencyGraph, GraphTarget, ModelConfig, ProcessingMode, TargetPart, Temporality, EVENT_TYPE,
};
use evstream_core::preprocess::{fit_numeric_stats, fit_vocabulary, MeasurementArtifacts, Split};
use evstream_core::represent::{collate, functional_observations, SequenceManifest, SubjectSequence};
use evstream_core::synth::{Oracle, OracleSpec, Sidecar};
use evstream_model::diagnostics::{
    compare_models, gradient_check, outer_probe, random_sequence, randomize, stage_probe,
};
use evstream_model::evaluate::{eval_generative, parse_labeler, task_prompts, zero_shot};
use evstream_model::generate::{GenerateOptions, Generator};
use evstream_model::train::{TrainOptions, Trainer};
use evstream_model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

static SERIAL: Mutex<()> = Mutex::new(());

/// Writes past the test harness's output capture so every verdict shows up.
fn report(n: usize, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {n:>2} {name:<28} {} ({:.1}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn verdict(n: usize, name: &str, start: Instant, limit: Duration, pass: bool, detail: String) {
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let detail = if in_time {
        detail
    } else {
        format!("{detail}; over the {}s budget", limit.as_secs())
    };
    report(n, name, pass && in_time, &detail, elapsed);
    assert!(pass && in_time, "criterion {n} ({name}) failed: {detail}");
}

struct Fixture {
    _dir: TempDir,
    sidecar: Sidecar,
    oracle: Oracle,
    manifest: SequenceManifest,
    splits: HashMap<Split, Vec<SubjectSequence>>,
}

impl Fixture {
    fn new(spec: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let oracle = Oracle::new(OracleSpec::from_yaml(spec).unwrap()).unwrap();
        let raw = dir.path().join("raw");
        let sidecar = oracle.write(&raw).unwrap();
        let config = load_dataset_config(&raw.join("dataset.yaml")).unwrap();
        let out = dir.path().join("ds");
        build_dataset(&config, &out).unwrap();
        let ds = Dataset::open(&out).unwrap();
        let splits = Split::ALL.iter().map(|s| (*s, ds.sequences(*s).unwrap())).collect();
        Self {
            _dir: dir,
            sidecar,
            oracle,
            manifest: ds.manifest,
            splits,
        }
    }

    fn split(&self, s: Split) -> &[SubjectSequence] {
        &self.splits[&s]
    }
}

fn target(name: &str, part: TargetPart) -> GraphTarget {
    GraphTarget {
        measurement: name.into(),
        part,
    }
}

fn model_config(
    mode: ProcessingMode,
    graph: Option<DependencyGraph>,
    d: usize,
    layers: usize,
    seq: usize,
) -> ModelConfig {
    ModelConfig {
        structured_event_processing_mode: mode,
        dependency_graph: graph,
        hidden_dim: d,
        num_layers: layers,
        num_heads: 2,
        max_seq_len: seq,
        tte_mixture_components: 4,
        learning_rate: 1e-2,
        ..ModelConfig::default()
    }
}

fn train(f: &Fixture, config: &ModelConfig, steps: usize, batch_size: usize, seed: u64) -> Model {
    let model = Model::new(&f.manifest.layout, config, seed).unwrap();
    let mut t = Trainer::new(model, TrainOptions { batch_size, seed });
    for _ in 0..steps {
        t.train_step(f.split(Split::Train)).unwrap();
    }
    t.model
}

const GENERAL: &str = r#"
n_subjects: 300
seed: 5
window_days: 20
base_rate: 1.5
max_events_per_subject: 30
dob: {mean_years: 50, stddev_years: 10}
functional: [age, time_of_day]
static_measurements:
  - {name: sex, keys: [F, M]}
event_types:
  - name: ADMIT
    initial: 1.0
    transitions: {LAB: 0.7, ADMIT: 0.3}
    menu:
      - {measurement: dx, count: {poisson: 1.5}}
  - name: LAB
    transitions: {LAB: 0.6, ADMIT: 0.4}
    menu:
      - {measurement: lab, count: {fixed: 2}, distinct: true}
      - {measurement: lab_item, count: {bernoulli: 0.8}}
measurements:
  - {name: dx, kind: categorical, keys: {count: 6, prefix: dx}}
  - name: lab
    kind: multivariate_regression
    keys: [A, B, C]
    value: {mean: 100, stddev: 15}
  - {name: lab_item, kind: categorical, keys: [w, x, y, z], table: panel}
  - {name: lab_value, kind: univariate_regression, companion_of: lab_item}
rules:
  - {rule: value_from_key, source: lab_item, target: lab_value, map: {w: 10, x: 20, y: 30, z: 40}}
"#;

fn general_graph() -> DependencyGraph {
    use TargetPart::*;
    DependencyGraph::new(vec![
        vec![target("age", Whole), target("time_of_day", Whole)],
        vec![
            target(EVENT_TYPE, Whole),
            target("dx", Whole),
            target("lab", CategoricalOnly),
            target("lab_item", Whole),
        ],
        vec![target("lab", NumericalOnly), target("lab_value", Whole)],
    ])
}

fn general_configs(d: usize, layers: usize) -> [ModelConfig; 2] {
    [
        model_config(ProcessingMode::ConditionallyIndependent, None, d, layers, 16),
        model_config(ProcessingMode::NestedAttention, Some(general_graph()), d, layers, 16),
    ]
}

fn random_model(f: &Fixture, config: &ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(&f.manifest.layout, config, seed).unwrap();
    randomize(&mut m, 0.2, &mut ChaCha8Rng::seed_from_u64(seed));
    m
}

#[test]
fn criterion_01_sparsity_ratio() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let spec = r#"
n_subjects: 60
seed: 1
max_events_per_subject: 20
base_rate: 10
split_fractions: [1.0, 0.0, 0.0]
event_types:
  - name: VISIT
    initial: 1.0
    menu:
      - {measurement: code, count: {fixed: 79}, distinct: true}
measurements:
  - {name: code, kind: categorical, keys: {count: 6049, prefix: c}}
"#;
    let f = Fixture::new(spec);
    let seqs: Vec<&SubjectSequence> = f.split(Split::Train).iter().collect();
    let batch = collate(&seqs, 32);
    let v = f.manifest.layout.vocab_size as usize;
    let ratio = batch.payload_cells() as f64 / batch.dense_cells(v) as f64;
    let mean_obs = batch.payload_cells() as f64 / batch.lengths.iter().sum::<usize>() as f64;
    let pass = v == 6053 && (ratio - 80.0 / 6053.0).abs() <= 0.003;
    verdict(
        1,
        "sparsity ratio",
        start,
        Duration::from_secs(60),
        pass,
        format!("V={v}, {mean_obs:.1} obs/event, payload/dense = {:.4}%", 100.0 * ratio),
    );
}

#[test]
fn criterion_02_gradient_check() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let f = Fixture::new(GENERAL);
    let seqs: Vec<&SubjectSequence> = f
        .split(Split::Train)
        .iter()
        .filter(|s| s.n_events() >= 3)
        .take(3)
        .collect();
    let windows: Vec<_> = seqs.iter().map(|s| 0..s.n_events().min(6)).collect();
    let batch = evstream_core::represent::collate_windows(&seqs, &windows);
    let mut worst = Vec::new();
    for (i, config) in general_configs(8, 2).iter().enumerate() {
        let m = random_model(&f, config, 1 + i as u64);
        let checks = gradient_check(&m, &batch, 100, 1e-4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        worst.push(checks.iter().map(|c| c.rel_error).fold(0.0, f64::max));
    }
    let pass = worst.iter().all(|w| *w < 1e-3);
    verdict(
        2,
        "gradient check",
        start,
        Duration::from_secs(120),
        pass,
        format!("max relative error CI {:.2e}, NA {:.2e}", worst[0], worst[1]),
    );
}

#[test]
fn criterion_03_causality() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let f = Fixture::new(GENERAL);
    let [ci, na] = general_configs(16, 2);
    let ci = random_model(&f, &ci, 3);
    let na = random_model(&f, &na, 4);
    let seqs = f.split(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 3];
    let mut violations = Vec::new();
    for i in 0..500 {
        let kind = i % 3;
        let p = match kind {
            0 => outer_probe(&ci, seqs, &mut rng),
            1 => outer_probe(&na, seqs, &mut rng),
            _ => stage_probe(&na, seqs, &mut rng),
        }
        .unwrap();
        counts[kind] += 1;
        if p.violated() {
            violations.push(p);
        }
    }
    verdict(
        3,
        "causality probes",
        start,
        Duration::from_secs(120),
        violations.is_empty(),
        format!(
            "{} outer CI + {} outer NA + {} inner NA probes, {} violations{}",
            counts[0],
            counts[1],
            counts[2],
            violations.len(),
            violations.first().map_or(String::new(), |v| format!(" (first: {v:?})"))
        ),
    );
}

#[test]
fn criterion_04_mode_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let f = Fixture::new(GENERAL);
    let layout = &f.manifest.layout;
    let ci = random_model(
        &f,
        &model_config(ProcessingMode::ConditionallyIndependent, None, 16, 2, 16),
        6,
    );
    let flat = DependencyGraph::new(vec![
        vec![],
        layout
            .entries
            .iter()
            .filter(|e| e.temporality == Temporality::Dynamic)
            .map(|e| target(&e.name, TargetPart::Whole))
            .collect(),
    ]);
    let mut na = Model::new(
        layout,
        &ModelConfig {
            structured_event_processing_mode: ProcessingMode::NestedAttention,
            dependency_graph: Some(flat),
            ..ci.config.clone()
        },
        0,
    )
    .unwrap();
    na.params = ci.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for b in 0..50u64 {
        let batch: Vec<SubjectSequence> = (0..4)
            .map(|j| random_sequence(layout, b * 4 + j, rng.gen_range(2..16), &mut rng))
            .collect();
        worst = worst.max(compare_models(&ci, &na, &batch).unwrap());
    }
    verdict(
        4,
        "mode equivalence",
        start,
        Duration::from_secs(120),
        worst <= 1e-6,
        format!("max emission difference over 50 batches {worst:.2e}"),
    );
}

const DEPENDENCY: &str = r#"
n_subjects: 1000
seed: 21
base_rate: 24
max_events_per_subject: 16
event_types:
  - name: LAB
    initial: 1.0
    menu:
      - {measurement: lab_item, count: {fixed: 1}}
measurements:
  - {name: lab_item, kind: categorical, keys: [w, x, y, z]}
  - {name: lab_value, kind: univariate_regression, companion_of: lab_item}
rules:
  - {rule: value_from_key, source: lab_item, target: lab_value, map: {w: 10, x: 20, y: 30, z: 40}}
"#;

fn lab_value_mse(f: &Fixture, m: &Model) -> f64 {
    let r = eval_generative(m, f.split(Split::Tune)).unwrap();
    r.heads.iter().find(|h| h.name == "lab_value").unwrap().mse.unwrap()
}

#[test]
fn criterion_05_dependency_recovery() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let f = Fixture::new(DEPENDENCY);
    let stats = match f.manifest.artifacts.get("lab_value").unwrap() {
        MeasurementArtifacts::Univariate { stats } => stats.clone(),
        _ => unreachable!(),
    };
    let floor = f.oracle.value_from_key_variance("lab_value").unwrap() / (stats.stddev * stats.stddev);
    use TargetPart::*;
    let graph = DependencyGraph::new(vec![
        vec![],
        vec![target(EVENT_TYPE, Whole), target("lab_item", Whole)],
        vec![target("lab_value", Whole)],
    ]);
    let na = train(
        &f,
        &model_config(ProcessingMode::NestedAttention, Some(graph), 16, 1, 16),
        2000,
        32,
        1,
    );
    let ci = train(
        &f,
        &model_config(ProcessingMode::ConditionallyIndependent, None, 16, 1, 16),
        2000,
        32,
        1,
    );
    let (na_mse, ci_mse) = (lab_value_mse(&f, &na), lab_value_mse(&f, &ci));
    verdict(
        5,
        "dependency recovery",
        start,
        Duration::from_secs(600),
        na_mse < 0.05 && ci_mse > 0.5,
        format!("value MSE nested {na_mse:.4}, independent {ci_mse:.4} (oracle marginal floor {floor:.4})"),
    );
}

const TTE: &str = r#"
n_subjects: 1000
seed: 22
max_events_per_subject: 24
event_types:
  - name: A
    initial: 0.5
    transitions: {A: 0.5, B: 0.5}
    tte: {weights: [0.6, 0.4], means: [3.4011973816621555, 5.703782474656201], stddevs: [0.4, 0.6]}
  - name: B
    initial: 0.5
    transitions: {A: 0.5, B: 0.5}
    tte: {weights: [1.0], means: [4.787491742782046], stddevs: [0.5]}
"#;

/// Mean true negative log density of every positive gap in `seqs`.
fn oracle_tte_nll(f: &Fixture, seqs: &[SubjectSequence]) -> f64 {
    let entry = f.manifest.layout.entry(EVENT_TYPE).unwrap();
    let vocab = match f.manifest.artifacts.get(EVENT_TYPE).unwrap() {
        MeasurementArtifacts::Categorical { vocabulary } => vocabulary.entries.clone(),
        _ => unreachable!(),
    };
    let (mut total, mut n) = (0.0, 0usize);
    for s in seqs {
        for i in 0..s.n_events().saturating_sub(1) {
            let dt = s.event_times[i + 1] - s.event_times[i];
            if dt <= 0.0 {
                continue;
            }
            let idx = s
                .event_range(i)
                .map(|k| s.obs_indices[k])
                .find(|x| entry.range().contains(x))
                .unwrap();
            let ty = f.oracle.type_index(&vocab[(idx - entry.offset) as usize]).unwrap();
            total -= f.oracle.tte_log_density(ty, dt);
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn criterion_06_tte_recovery() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let f = Fixture::new(TTE);
    let m = train(
        &f,
        &model_config(ProcessingMode::ConditionallyIndependent, None, 16, 1, 32),
        500,
        32,
        2,
    );
    let held = f.split(Split::HeldOut);
    let model_nll = eval_generative(&m, held).unwrap().tte_nll;
    let true_nll = oracle_tte_nll(&f, held);
    verdict(
        6,
        "TTE recovery",
        start,
        Duration::from_secs(600),
        (model_nll - true_nll).abs() <= 0.1,
        format!("held-out TTE NLL model {model_nll:.4}, oracle {true_nll:.4}"),
    );
}

#[test]
fn criterion_07_generation_invariants() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let f = Fixture::new(GENERAL);
    let [_, na] = general_configs(16, 1);
    let m = train(&f, &na, 60, 16, 3);
    let layout = &f.manifest.layout;
    let prompts: Vec<SubjectSequence> = f
        .split(Split::Train)
        .iter()
        .chain(f.split(Split::Tune))
        .filter(|s| s.n_events() > 0)
        .cycle()
        .take(1000)
        .cloned()
        .collect();
    let g = Generator::new(
        &m,
        &f.manifest,
        GenerateOptions {
            max_events: 8,
            ..GenerateOptions::default()
        },
    );
    let trajectories = g.trajectories(&prompts, 11).unwrap();
    let (mut events, mut violations) = (0usize, Vec::new());
    for (t, p) in trajectories.iter().zip(&prompts) {
        let mut last = t.prompt_end_time;
        for e in &t.events {
            events += 1;
            if !(e.time > last) {
                violations.push(format!("time {} after {}", e.time, last));
            }
            last = e.time;
            let obs = e.observations();
            if let Some((i, _)) = obs.iter().find(|(i, _)| *i == 0 || *i >= layout.vocab_size) {
                violations.push(format!("index {i} outside vocabulary"));
            }
            let functional: Vec<_> = obs
                .iter()
                .copied()
                .filter(|(i, _)| {
                    layout
                        .owner(*i)
                        .is_some_and(|(pos, _)| layout.entries[pos].temporality == Temporality::FunctionalTimeDependent)
                })
                .collect();
            let expected = functional_observations(layout, &f.manifest.artifacts, e.time, p.dob, p.subject_id).unwrap();
            if functional != expected {
                violations.push(format!("functional features {functional:?} != {expected:?}"));
            }
        }
    }
    verdict(
        7,
        "generation invariants",
        start,
        Duration::from_secs(300),
        violations.is_empty() && trajectories.len() == 1000,
        format!(
            "{} trajectories, {events} events, {} violations{}",
            trajectories.len(),
            violations.len(),
            violations.first().map_or(String::new(), |v| format!(" (first: {v})"))
        ),
    );
}

const TRIGGER: &str = r#"
n_subjects: 2000
seed: 23
max_events_per_subject: 24
event_types:
  - name: E
    initial: 1.0
    transitions: {E: 0.95, X: 0.05}
    tte: {weights: [1.0], means: [4.0943445622221], stddevs: [0.3]}
    menu:
      - {measurement: flag, count: {fixed: 1}}
  - name: X
    transitions: {E: 1.0}
    tte: {weights: [1.0], means: [4.0943445622221], stddevs: [0.3]}
measurements:
  - {name: flag, kind: categorical, keys: [s, n], key_probs: [0.3, 0.7]}
rules:
  - {rule: trigger_next_type, measurement: flag, key: s, next_type: X, prob: 0.9}
task: {name: x_within_100, target_type: X, horizon_minutes: 100, n_mc: 20000}
"#;

#[test]
fn criterion_08_zero_shot() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let f = Fixture::new(TRIGGER);
    let m = train(
        &f,
        &model_config(ProcessingMode::ConditionallyIndependent, None, 16, 1, 16),
        400,
        32,
        4,
    );
    let truth = f.sidecar.task.clone().unwrap();
    let held = f.split(Split::HeldOut);
    let ids: HashSet<u64> = held.iter().map(|s| s.subject_id).collect();
    let task = evstream_core::task::TaskSpec {
        name: truth.name.clone(),
        horizon_minutes: truth.horizon_minutes,
        rows: truth
            .rows
            .iter()
            .copied()
            .filter(|r| ids.contains(&r.subject_id))
            .collect(),
    };
    let prompts = task_prompts(&task.rows, held);
    let labeler = parse_labeler("event:X").unwrap();
    let r = zero_shot(&m, &f.manifest, &task, &prompts, labeler.as_ref(), 64, 9, 64).unwrap();
    let auroc = r.auroc.unwrap_or(0.0);
    let bayes = truth.auroc_for(&ids).unwrap();
    verdict(
        8,
        "zero-shot AUROC",
        start,
        Duration::from_secs(900),
        auroc >= 0.8 && (auroc - bayes).abs() <= 0.1,
        format!(
            "{} rows, n_samples 64: AUROC {auroc:.4}, Bayes reference {bayes:.4}",
            r.rows.len()
        ),
    );
}

const SCALING: &str = r#"
n_subjects: 10000
seed: 31
window_days: 30
base_rate: 0.5
max_events_per_subject: 20
dob: {mean_years: 50, stddev_years: 10}
functional: [age]
static_measurements:
  - {name: sex, keys: [F, M]}
event_types:
  - name: ADMIT
    initial: 1.0
    transitions: {LAB: 0.7, ADMIT: 0.3}
    menu:
      - {measurement: dx, count: {poisson: 1.5}}
  - name: LAB
    transitions: {LAB: 0.6, ADMIT: 0.4}
    menu:
      - {measurement: lab_item, count: {bernoulli: 0.8}}
measurements:
  - {name: dx, kind: categorical, keys: {count: 50, prefix: dx}}
  - {name: lab_item, kind: categorical, keys: [w, x, y, z], table: panel}
  - {name: lab_value, kind: univariate_regression, companion_of: lab_item}
rules:
  - {rule: value_from_key, source: lab_item, target: lab_value, map: {w: 10, x: 20, y: 30, z: 40}, noise: 2}
"#;

fn cli(args: &[&str]) -> serde_json::Value {
    let mut full = vec!["evstream"];
    full.extend_from_slice(args);
    run(&Cli::parse_from(full)).unwrap().report
}

fn dataset_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    evstream_cli::manifest::file_sizes(dir)
        .unwrap()
        .into_iter()
        .filter(|(rel, _)| rel != evstream_cli::manifest::BUILD_STATS_FILE)
        .map(|(rel, _)| (rel.clone(), std::fs::read(dir.join(&rel)).unwrap()))
        .collect()
}

fn timed_build(config: &Path, out: &Path, threads: &str) -> f64 {
    let start = Instant::now();
    cli(&[
        "--threads",
        threads,
        "build",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    start.elapsed().as_secs_f64()
}

#[test]
fn criterion_09_build_determinism_and_scaling() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let write = |n: usize| -> PathBuf {
        let raw = dir.path().join(format!("raw{n}"));
        let spec = SCALING.replace("n_subjects: 10000", &format!("n_subjects: {n}"));
        Oracle::new(OracleSpec::from_yaml(&spec).unwrap())
            .unwrap()
            .write(&raw)
            .unwrap();
        raw.join("dataset.yaml")
    };
    let (small, large) = (write(10_000), write(20_000));
    let out = |name: &str| dir.path().join(name);
    let t1 = timed_build(&small, &out("a"), "4");
    let rerun = timed_build(&small, &out("b"), "4");
    timed_build(&small, &out("c"), "1");
    let a = dataset_files(&out("a"));
    let reproducible = a == dataset_files(&out("b")) && a == dataset_files(&out("c"));
    let t2 = timed_build(&large, &out("d"), "4").min(timed_build(&large, &out("e"), "4"));
    let t1 = t1.min(rerun);
    let ratio = t2 / t1;
    verdict(
        9,
        "build determinism/scaling",
        start,
        Duration::from_secs(600),
        reproducible && ratio <= 2.5,
        format!(
            "{} files byte-identical across reruns and 1/4 threads: {reproducible}; 10k {t1:.2}s, 20k {t2:.2}s, ratio {ratio:.2}",
            a.len()
        ),
    );
}

fn brute_force_vocab(keys: &[String], min_frequency: u64) -> (Vec<String>, Vec<u64>) {
    let mut counts: Vec<(String, u64)> = Vec::new();
    for k in keys {
        match counts.iter_mut().find(|(x, _)| x == k) {
            Some(e) => e.1 += 1,
            None => counts.push((k.clone(), 1)),
        }
    }
    let unk = counts.iter().filter(|(_, c)| *c < min_frequency).map(|(_, c)| c).sum();
    let mut kept: Vec<(String, u64)> = counts.into_iter().filter(|(_, c)| *c >= min_frequency).collect();
    for i in 1..kept.len() {
        let mut j = i;
        while j > 0 && (kept[j].1 > kept[j - 1].1 || (kept[j].1 == kept[j - 1].1 && kept[j].0 < kept[j - 1].0)) {
            kept.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut entries = vec!["UNK".to_string()];
    let mut out = vec![unk];
    for (k, c) in kept {
        entries.push(k);
        out.push(c);
    }
    (entries, out)
}

#[test]
fn criterion_10_preprocessing_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    let mut worst_round_trip: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..200);
        let scale = 10f64.powf(rng.gen_range(-3.0..6.0));
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let stats = fit_numeric_stats("m", None, &values, None, 5.0);
        for &v in &values {
            let back = stats.denormalize(stats.normalize(v));
            worst_round_trip = worst_round_trip.max((back - v).abs() / v.abs().max(1.0));
        }
    }

    let mut vocab_mismatches = 0;
    for _ in 0..100 {
        let alphabet = rng.gen_range(1..30);
        let keys: Vec<String> = (0..rng.gen_range(0..300))
            .map(|_| format!("k{}", rng.gen_range(0..alphabet)))
            .collect();
        let min_frequency = rng.gen_range(0..5);
        let v = fit_vocabulary("m", keys.iter().map(String::as_str), min_frequency);
        if (v.entries, v.counts) != brute_force_vocab(&keys, min_frequency) {
            vocab_mismatches += 1;
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let oracle = Oracle::new(OracleSpec::from_yaml(GENERAL).unwrap()).unwrap();
    let mut subjects = oracle.sample_subjects();
    oracle.write_subjects(&subjects, &dir.path().join("raw")).unwrap();
    let config_a = load_dataset_config(&dir.path().join("raw/dataset.yaml")).unwrap();
    let built_a = build_dataset(&config_a, &dir.path().join("ds_a")).unwrap();
    let mut changed = 0;
    for s in &mut subjects {
        if built_a.splits.get(s.subject_id) == Some(Split::Train) {
            continue;
        }
        for e in &mut s.events {
            for o in &mut e.obs {
                if let Some(v) = &mut o.value {
                    *v = *v * 7.0 + 1000.0;
                    changed += 1;
                }
                if let Some(k) = &mut o.key {
                    *k = 0;
                    changed += 1;
                }
            }
        }
    }
    oracle.write_subjects(&subjects, &dir.path().join("raw")).unwrap();
    let config_b = load_dataset_config(&dir.path().join("raw/dataset.yaml")).unwrap();
    build_dataset(&config_b, &dir.path().join("ds_b")).unwrap();
    let artifacts = |d: &str| std::fs::read(dir.path().join(d).join(PREPROCESSING_FILE)).unwrap();
    let stable = artifacts("ds_a") == artifacts("ds_b");
    let held_changed = {
        let a = Dataset::open(&dir.path().join("ds_a"))
            .unwrap()
            .sequences(Split::HeldOut)
            .unwrap();
        let b = Dataset::open(&dir.path().join("ds_b"))
            .unwrap()
            .sequences(Split::HeldOut)
            .unwrap();
        a != b
    };

    verdict(
        10,
        "preprocessing correctness",
        start,
        Duration::from_secs(120),
        worst_round_trip <= 1e-9 && vocab_mismatches == 0 && stable && held_changed && changed > 0,
        format!(
            "round trip max error {worst_round_trip:.1e}; {vocab_mismatches}/100 vocabulary mismatches; \
             artifacts byte-stable after altering {changed} held-out/tune values and keys: {stable}"
        ),
    );
}
