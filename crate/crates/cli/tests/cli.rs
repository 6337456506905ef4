use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use evstream_cli::manifest::BUILD_STATS_FILE;
use evstream_cli::{run, Cli, Outcome};
use evstream_core::build::Dataset;
use evstream_core::synth::Sidecar;
use evstream_model::checkpoint;
use evstream_model::Model;
use tempfile::TempDir;

const SPEC: &str = r#"
n_subjects: 200
seed: 3
window_days: 10
base_rate: 2.0
max_events_per_subject: 20
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
      - {measurement: lab_item, count: {bernoulli: 0.8}}
measurements:
  - {name: dx, kind: categorical, keys: {count: 5, prefix: dx}}
  - {name: lab_item, kind: categorical, keys: [w, x], table: panel}
  - {name: lab_value, kind: univariate_regression, companion_of: lab_item}
rules:
  - {rule: value_from_key, source: lab_item, target: lab_value, map: {w: 10, x: 20}}
task:
  name: lab_soon
  target_type: LAB
  horizon_minutes: 600
  n_mc: 200
"#;

const MODEL: &str =
    "hidden_dim: 8\nnum_layers: 1\nnum_heads: 2\nmax_seq_len: 8\ntte_mixture_components: 2\nlearning_rate: 0.01\n";

fn cli(args: &[&str]) -> anyhow::Result<Outcome> {
    let mut full = vec!["evstream"];
    full.extend_from_slice(args);
    run(&Cli::parse_from(full))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(spec: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("spec.yaml"), spec).unwrap();
        std::fs::write(dir.path().join("model.yaml"), MODEL).unwrap();
        let w = Self { dir };
        cli(&["synth", "--spec", p(&w.path("spec.yaml")), "--out", p(&w.path("raw"))]).unwrap();
        w
    }

    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.dir.path().join(rel)
    }

    fn build(&self, out: &str, threads: &str) -> Outcome {
        cli(&[
            "--threads",
            threads,
            "build",
            "--config",
            p(&self.path("raw/dataset.yaml")),
            "--out",
            p(&self.path(out)),
        ])
        .unwrap()
    }

    fn pretrain(&self, out: &str, steps: &str, seed: &str) -> anyhow::Result<Outcome> {
        cli(&[
            "pretrain",
            "--dataset",
            p(&self.path("ds")),
            "--model-config",
            p(&self.path("model.yaml")),
            "--out",
            p(&self.path(out)),
            "--steps",
            steps,
            "--seed",
            seed,
            "--batch-size",
            "8",
        ])
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = evstream_cli::manifest::file_sizes(dir)
        .unwrap()
        .into_iter()
        .filter(|(rel, _)| rel != BUILD_STATS_FILE)
        .map(|(rel, _)| (rel.clone(), std::fs::read(dir.join(&rel)).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn build_is_reproducible_and_reports_oracle_counts() {
    let w = Workspace::new(SPEC);
    let report = w.build("ds", "1").report;
    w.build("ds2", "4");
    assert_eq!(files(&w.path("ds")), files(&w.path("ds2")));
    w.build("ds", "2");
    assert_eq!(files(&w.path("ds")), files(&w.path("ds2")));

    let sidecar = Sidecar::read(&w.path("raw/sidecar.json")).unwrap();
    assert_eq!(report["counts"]["subjects"], sidecar.n_subjects as u64);
    assert_eq!(report["counts"]["events"], sidecar.n_events);
    assert_eq!(
        report["counts"]["measurements"],
        sidecar.measurement_counts.values().sum::<u64>()
    );
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("ds").join(BUILD_STATS_FILE)).unwrap()).unwrap();
    assert!(stats["wall_seconds"].as_f64().unwrap() > 0.0);
    assert!(stats["stage_seconds"].as_array().unwrap().len() >= 4);
    assert!(stats.get("peak_memory_bytes").is_some());
}

#[test]
fn missing_source_names_the_source() {
    let w = Workspace::new(SPEC);
    let victim = evstream_core::config::load_dataset_config(&w.path("raw/dataset.yaml"))
        .unwrap()
        .sources
        .iter()
        .find(|s| s.name == "panel")
        .unwrap()
        .path
        .clone();
    std::fs::remove_file(w.path("raw").join(&victim)).unwrap();
    let err = cli(&[
        "build",
        "--config",
        p(&w.path("raw/dataset.yaml")),
        "--out",
        p(&w.path("ds")),
    ])
    .unwrap_err();
    assert!(format!("{err:#}").contains("panel"), "{err:#}");
}

#[test]
fn pretrain_zero_steps_saves_initialization_and_seeds_reproduce() {
    let w = Workspace::new(SPEC);
    w.build("ds", "2");
    w.pretrain("zero", "0", "7").unwrap();
    let ds = Dataset::open(&w.path("ds")).unwrap();
    let (m, header): (Model, _) = checkpoint::load(&w.path("zero/checkpoint.bin"), &ds.manifest).unwrap();
    let fresh = Model::new(&ds.manifest.layout, &header.model_config, 7).unwrap();
    assert_eq!(m.params, fresh.params);
    assert_eq!(header.step, 0);

    let a = w.pretrain("a", "30", "1").unwrap().report;
    let b = w.pretrain("b", "30", "1").unwrap().report;
    assert_eq!(a["final_loss"], b["final_loss"]);
    assert_eq!(
        std::fs::read(w.path("a/checkpoint.bin")).unwrap(),
        std::fs::read(w.path("b/checkpoint.bin")).unwrap()
    );
    let log = std::fs::read_to_string(w.path("a/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);
}

#[test]
fn downstream_commands_run_and_refuse_foreign_checkpoints() {
    let w = Workspace::new(SPEC);
    w.build("ds", "2");
    w.pretrain("run", "20", "0").unwrap();
    let ds = w.path("ds");
    let ck = w.path("run/checkpoint.bin");
    let out = w.path("gen.jsonl");
    let g = cli(&[
        "generate",
        "--dataset",
        p(&ds),
        "--checkpoint",
        p(&ck),
        "--out",
        p(&out),
        "--prompt-split",
        "tune",
        "--n-samples",
        "2",
        "--seed",
        "4",
        "--max-events",
        "5",
    ])
    .unwrap();
    let lines = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        lines.lines().count() as u64,
        g.report["n_trajectories"].as_u64().unwrap()
    );
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["events"].as_array().unwrap().len(), 5);

    let e = cli(&[
        "evaluate",
        "--dataset",
        p(&ds),
        "--checkpoint",
        p(&ck),
        "--split",
        "tune",
    ])
    .unwrap();
    assert!(e.report["total_nll"].as_f64().unwrap().is_finite());

    let task = w.path("raw/lab_soon.json");
    let z = cli(&[
        "evaluate-zeroshot",
        "--dataset",
        p(&ds),
        "--checkpoint",
        p(&ck),
        "--task",
        p(&task),
        "--labeler",
        "positive",
        "--n-samples",
        "2",
        "--max-events",
        "4",
    ])
    .unwrap();
    assert!(z.report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["probability"] == 1.0));

    let f = cli(&[
        "finetune",
        "--dataset",
        p(&ds),
        "--checkpoint",
        p(&ck),
        "--task",
        p(&task),
        "--eval-split",
        "tune",
    ])
    .unwrap();
    assert!(f.report["n_train"].as_u64().unwrap() > 0);

    let i = cli(&["inspect", "--dataset", p(&ds), "--checkpoint", p(&ck)]).unwrap();
    assert_eq!(i.report["checkpoint"]["step"], 20);

    let other = Workspace::new(&SPEC.replace("seed: 3", "seed: 4"));
    other.build("ds", "1");
    let err = cli(&["evaluate", "--dataset", p(&other.path("ds")), "--checkpoint", p(&ck)]).unwrap_err();
    assert!(format!("{err:#}").contains("dataset"), "{err:#}");
}

#[test]
fn bench_reports_storage_and_handles_empty_datasets() {
    let w = Workspace::new(SPEC);
    w.build("ds", "2");
    let b = cli(&[
        "bench",
        "--dataset",
        p(&w.path("ds")),
        "--config",
        p(&w.path("raw/dataset.yaml")),
    ])
    .unwrap()
    .report;
    assert!(b["n_events"].as_u64().unwrap() > 0);
    assert!(b["build"]["rows_per_second"].as_f64().unwrap() > 0.0);
    assert!(b["dense_to_sparse"].as_f64().unwrap() > 1.0);

    let empty = Workspace::new(&SPEC.replace("n_subjects: 200", "n_subjects: 0").replace(
        "task:\n  name: lab_soon\n  target_type: LAB\n  horizon_minutes: 600\n  n_mc: 200\n",
        "",
    ));
    empty.build("ds", "1");
    let b = cli(&["bench", "--dataset", p(&empty.path("ds"))]).unwrap().report;
    assert_eq!(b["n_events"], 0);
    assert_eq!(b["events_per_second"], 0.0);
    assert!(b["dense_to_sparse"].is_null());
}

#[test]
fn binary_exit_codes_and_json_output() {
    let exe = env!("CARGO_BIN_EXE_evstream");
    let w = Workspace::new(SPEC);
    let ok = Process::new(exe)
        .args([
            "--json",
            "build",
            "--config",
            p(&w.path("raw/dataset.yaml")),
            "--out",
            p(&w.path("ds")),
        ])
        .output()
        .unwrap();
    assert!(ok.status.success());
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["command"], "build");

    let bad = Process::new(exe)
        .args(["inspect", "--dataset", p(&w.path("nowhere"))])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(bad.stdout.is_empty());
    assert!(!bad.stderr.is_empty());
}
