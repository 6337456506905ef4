#![allow(dead_code)]

use evstream_core::build::{build_dataset, Dataset};
use evstream_core::config::{
    load_dataset_config, DependencyGraph, GraphTarget, ModelConfig, ProcessingMode, TargetPart, Temporality,
};
use evstream_core::preprocess::Split;
use evstream_core::represent::{SequenceManifest, SubjectSequence};
use evstream_core::synth::{Oracle, OracleSpec};
use tempfile::TempDir;

pub const SPEC: &str = r#"
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

pub struct Fixture {
    pub dir: TempDir,
    pub manifest: SequenceManifest,
    pub train: Vec<SubjectSequence>,
    pub tuning: Vec<SubjectSequence>,
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    Oracle::new(OracleSpec::from_yaml(SPEC).unwrap())
        .unwrap()
        .write(&raw)
        .unwrap();
    let config = load_dataset_config(&raw.join("dataset.yaml")).unwrap();
    let out = dir.path().join("ds");
    build_dataset(&config, &out).unwrap();
    let ds = Dataset::open(&out).unwrap();
    let manifest = SequenceManifest::read(&out).unwrap();
    Fixture {
        manifest,
        train: ds.sequences(Split::Train).unwrap(),
        tuning: ds.sequences(Split::Tune).unwrap(),
        dir,
    }
}

pub fn config(mode: ProcessingMode, d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        structured_event_processing_mode: mode,
        hidden_dim: d,
        num_layers: layers,
        num_heads: 2,
        max_seq_len: 16,
        tte_mixture_components: 2,
        learning_rate: 1e-2,
        ..ModelConfig::default()
    }
}

fn target(name: &str, part: TargetPart) -> GraphTarget {
    GraphTarget {
        measurement: name.into(),
        part,
    }
}

/// Functional features, then keys, then values.
pub fn staged_graph() -> DependencyGraph {
    use TargetPart::*;
    DependencyGraph::new(vec![
        vec![target("age", Whole), target("time_of_day", Whole)],
        vec![
            target("event_type", Whole),
            target("dx", Whole),
            target("lab", CategoricalOnly),
            target("lab_item", Whole),
        ],
        vec![target("lab", NumericalOnly), target("lab_value", Whole)],
    ])
}

/// Every dynamic measurement in one stage after an empty functional stage.
pub fn flat_graph(manifest: &SequenceManifest) -> DependencyGraph {
    DependencyGraph::new(vec![
        vec![],
        manifest
            .layout
            .entries
            .iter()
            .filter(|e| e.temporality == Temporality::Dynamic)
            .map(|e| target(&e.name, TargetPart::Whole))
            .collect(),
    ])
}

pub fn na_config(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        dependency_graph: Some(staged_graph()),
        ..config(ProcessingMode::NestedAttention, d, layers)
    }
}
