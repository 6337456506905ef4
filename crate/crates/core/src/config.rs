//! Dataset and model configuration.
//!
//! Configuration documents are YAML. Every struct rejects unknown fields so
//! that a misspelled key fails loudly instead of silently falling back to a
//! default.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Name of the implicit categorical measurement carrying each event's type.
pub const EVENT_TYPE: &str = "event_type";

/// Functional time-dependent features that can be computed from a timestamp
/// and the subject's static record.
pub const REGISTERED_FUNCTIONAL: &[&str] = &["age", "time_of_day"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    Split([f64; 3]),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("dependency graph references unknown measurement `{0}`")]
    UnknownMeasurement(String),
    #[error("stage-0 violation: {0}")]
    StageZeroViolation(String),
    #[error("measurement part `{0}` appears more than once in the dependency graph")]
    DuplicateTarget(String),
    #[error("numerical part of `{0}` precedes its categorical part")]
    PartOrderViolation(String),
    #[error("part `{part}` is not valid for measurement `{measurement}`")]
    InvalidPart { measurement: String, part: String },
    #[error("static measurement `{0}` cannot be a generative target")]
    StaticTarget(String),
    #[error("measurement part `{0}` is missing from the dependency graph")]
    MissingTarget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temporality {
    Static,
    Dynamic,
    FunctionalTimeDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Categorical,
    UnivariateRegression,
    MultivariateRegression,
}

impl ValueKind {
    pub fn has_keys(self) -> bool {
        !matches!(self, ValueKind::UnivariateRegression)
    }

    pub fn has_values(self) -> bool {
        !matches!(self, ValueKind::Categorical)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    Csv,
    Parquet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    #[default]
    Minutes,
}

/// One raw input table.
///
/// A source without `timestamp_column` is subject-level (static data). A
/// timestamped source defines events when it names an event type (constant
/// or per-row column); otherwise its rows attach to whatever event exists at
/// the same subject and timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub name: String,
    pub path: PathBuf,
    pub format: SourceFormat,
    pub subject_id_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_type_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dob_column: Option<String>,
}

impl SourceConfig {
    pub fn defines_events(&self) -> bool {
        self.event_type.is_some() || self.event_type_column.is_some()
    }

    pub fn is_subject_level(&self) -> bool {
        self.timestamp_column.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    pub name: String,
    pub temporality: Temporality,
    pub value_kind: ValueKind,
    #[serde(default)]
    pub min_frequency: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub censor_bounds: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_column: Option<String>,
}

impl MeasurementConfig {
    pub fn is_functional(&self) -> bool {
        self.temporality == Temporality::FunctionalTimeDependent
    }

    /// Column holding the numeric value of a regression measurement.
    pub fn numeric_column(&self) -> Option<&str> {
        self.value_column.as_deref().or(match self.value_kind {
            ValueKind::UnivariateRegression => self.key_column.as_deref(),
            _ => None,
        })
    }
}

fn default_cutoff() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub sources: Vec<SourceConfig>,
    pub measurements: Vec<MeasurementConfig>,
    pub split_fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cutoff")]
    pub outlier_stddev_cutoff: f64,
    #[serde(default)]
    pub time_unit: TimeUnit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPart {
    Whole,
    CategoricalOnly,
    NumericalOnly,
}

impl TargetPart {
    fn as_str(self) -> &'static str {
        match self {
            TargetPart::Whole => "whole",
            TargetPart::CategoricalOnly => "categorical_only",
            TargetPart::NumericalOnly => "numerical_only",
        }
    }
}

/// Atomic component of a measurement, used for stage bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Categorical,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawTarget", into = "RawTarget")]
pub struct GraphTarget {
    pub measurement: String,
    pub part: TargetPart,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawTarget {
    Name(String),
    Pair(String, TargetPart),
}

impl From<RawTarget> for GraphTarget {
    fn from(raw: RawTarget) -> Self {
        match raw {
            RawTarget::Name(measurement) => GraphTarget {
                measurement,
                part: TargetPart::Whole,
            },
            RawTarget::Pair(measurement, part) => GraphTarget { measurement, part },
        }
    }
}

impl From<GraphTarget> for RawTarget {
    fn from(t: GraphTarget) -> Self {
        match t.part {
            TargetPart::Whole => RawTarget::Name(t.measurement),
            part => RawTarget::Pair(t.measurement, part),
        }
    }
}

/// Ordered stages of measurement parts. Targets in a stage condition on the
/// history and on every earlier stage of the same event.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DependencyGraph {
    pub stages: Vec<Vec<GraphTarget>>,
}

impl DependencyGraph {
    pub fn new(stages: Vec<Vec<GraphTarget>>) -> Self {
        Self { stages }
    }

    /// Stage of every atomic `(measurement, component)`; only meaningful on a
    /// validated graph.
    pub fn component_stages(&self, kinds: &HashMap<String, ValueKind>) -> BTreeMap<(String, Component), usize> {
        let mut out = BTreeMap::new();
        for (stage, targets) in self.stages.iter().enumerate() {
            for t in targets {
                let kind = kinds.get(&t.measurement).copied().unwrap_or(ValueKind::Categorical);
                for c in components(kind, t.part).unwrap_or_default() {
                    out.insert((t.measurement.clone(), c), stage);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessingMode {
    #[default]
    ConditionallyIndependent,
    NestedAttention,
}

fn d_hidden() -> usize {
    32
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_seq() -> usize {
    64
}
fn d_mix() -> usize {
    4
}
fn d_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub structured_event_processing_mode: ProcessingMode,
    #[serde(
        default,
        alias = "measurements_per_dep_graph_level",
        skip_serializing_if = "Option::is_none"
    )]
    pub dependency_graph: Option<DependencyGraph>,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_layers")]
    pub num_layers: usize,
    #[serde(default = "d_heads")]
    pub num_heads: usize,
    #[serde(default = "d_seq")]
    pub max_seq_len: usize,
    #[serde(default = "d_mix")]
    pub tte_mixture_components: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub measurement_vocab_sizes: BTreeMap<String, usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            structured_event_processing_mode: ProcessingMode::default(),
            dependency_graph: None,
            hidden_dim: d_hidden(),
            num_layers: d_layers(),
            num_heads: d_heads(),
            max_seq_len: d_seq(),
            tte_mixture_components: d_mix(),
            learning_rate: d_lr(),
            measurement_vocab_sizes: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    /// Structural checks that do not need the dataset's measurements.
    pub fn validate_shape(&self) -> Result<(), ConfigError> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
            ("tte_mixture_components", self.tte_mixture_components),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Schema(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(ConfigError::Schema(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(ConfigError::Schema("hidden_dim must be even".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Schema("learning_rate must be positive".into()));
        }
        match (self.structured_event_processing_mode, &self.dependency_graph) {
            (ProcessingMode::NestedAttention, None) => Err(ConfigError::Schema(
                "nested_attention requires a dependency graph".into(),
            )),
            (ProcessingMode::ConditionallyIndependent, Some(_)) => Err(ConfigError::Schema(
                "a dependency graph is only valid with nested_attention".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn validate(&self, measurements: &[MeasurementConfig]) -> Result<(), ConfigError> {
        self.validate_shape()?;
        if let Some(g) = &self.dependency_graph {
            validate_dependency_graph(g, measurements)?;
        }
        Ok(())
    }
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig, ConfigError> {
    let cfg: ModelConfig = serde_yaml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
    cfg.validate_shape()?;
    Ok(cfg)
}

/// Parses and fully validates a dataset configuration document.
pub fn parse_dataset_config(text: &str) -> Result<DatasetConfig, ConfigError> {
    let cfg: DatasetConfig = serde_yaml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file and resolves relative source paths against its
/// directory.
pub fn load_dataset_config(path: &Path) -> Result<DatasetConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = parse_dataset_config(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for s in &mut cfg.sources {
        if s.path.is_relative() {
            s.path = base.join(&s.path);
        }
    }
    Ok(cfg)
}

impl DatasetConfig {
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Stable content hash over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn source(&self, name: &str) -> Option<&SourceConfig> {
        self.sources.iter().find(|s| s.name == name)
    }

    pub fn measurement(&self, name: &str) -> Option<&MeasurementConfig> {
        self.measurements.iter().find(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let [a, b, c] = self.split_fractions;
        if [a, b, c].iter().any(|f| !(*f >= 0.0) || !f.is_finite()) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Split(self.split_fractions));
        }
        if !(self.outlier_stddev_cutoff > 0.0) {
            return Err(ConfigError::Schema("outlier_stddev_cutoff must be positive".into()));
        }

        let mut names = BTreeSet::new();
        for s in &self.sources {
            if !names.insert(s.name.as_str()) {
                return Err(ConfigError::Schema(format!("duplicate source `{}`", s.name)));
            }
            if s.event_type.is_some() && s.event_type_column.is_some() {
                return Err(ConfigError::Schema(format!(
                    "source `{}` sets both event_type and event_type_column",
                    s.name
                )));
            }
            if s.is_subject_level() && s.defines_events() {
                return Err(ConfigError::Schema(format!(
                    "source `{}` has no timestamp_column but declares an event type",
                    s.name
                )));
            }
        }

        let mut names = BTreeSet::new();
        let has_dob = self.sources.iter().any(|s| s.dob_column.is_some());
        for m in &self.measurements {
            if m.name == EVENT_TYPE {
                return Err(ConfigError::Schema(format!("`{EVENT_TYPE}` is reserved")));
            }
            if !names.insert(m.name.as_str()) {
                return Err(ConfigError::Schema(format!("duplicate measurement `{}`", m.name)));
            }
            if let Some((lo, hi)) = m.censor_bounds {
                if !(lo <= hi) {
                    return Err(ConfigError::Schema(format!(
                        "censor_bounds of `{}` are inverted",
                        m.name
                    )));
                }
            }
            match m.temporality {
                Temporality::FunctionalTimeDependent => {
                    if !REGISTERED_FUNCTIONAL.contains(&m.name.as_str()) {
                        return Err(ConfigError::Schema(format!(
                            "`{}` is not a registered feature function (known: {REGISTERED_FUNCTIONAL:?})",
                            m.name
                        )));
                    }
                    if m.source_table.is_some() {
                        return Err(ConfigError::Schema(format!(
                            "functional measurement `{}` cannot name a source_table",
                            m.name
                        )));
                    }
                    let expected = if m.name == "age" {
                        ValueKind::UnivariateRegression
                    } else {
                        ValueKind::Categorical
                    };
                    if m.value_kind != expected {
                        return Err(ConfigError::Schema(format!(
                            "functional measurement `{}` must be {expected:?}",
                            m.name
                        )));
                    }
                    if m.name == "age" && !has_dob {
                        return Err(ConfigError::Reference("`age` requires a source with dob_column".into()));
                    }
                }
                Temporality::Static | Temporality::Dynamic => {
                    let Some(table) = &m.source_table else {
                        return Err(ConfigError::Schema(format!("`{}` is missing source_table", m.name)));
                    };
                    let Some(source) = self.source(table) else {
                        return Err(ConfigError::Reference(format!(
                            "measurement `{}` references missing source `{table}`",
                            m.name
                        )));
                    };
                    if m.key_column.is_none() {
                        return Err(ConfigError::Schema(format!("`{}` is missing key_column", m.name)));
                    }
                    if m.value_kind == ValueKind::MultivariateRegression && m.value_column.is_none() {
                        return Err(ConfigError::Schema(format!(
                            "multivariate_regression measurement `{}` requires value_column",
                            m.name
                        )));
                    }
                    if m.temporality == Temporality::Static && m.value_kind != ValueKind::Categorical {
                        return Err(ConfigError::Schema(format!(
                            "static measurement `{}` must be categorical",
                            m.name
                        )));
                    }
                    if m.temporality == Temporality::Dynamic && source.is_subject_level() {
                        return Err(ConfigError::Schema(format!(
                            "dynamic measurement `{}` reads subject-level source `{table}`",
                            m.name
                        )));
                    }
                }
            }
        }
        if let Some(model) = &self.model {
            model.validate(&self.measurements)?;
        }
        Ok(())
    }
}

/// Atomic components named by a `(kind, part)` pair, or `None` when the part
/// does not exist for that kind.
pub fn components(kind: ValueKind, part: TargetPart) -> Option<Vec<Component>> {
    use Component::*;
    match (kind, part) {
        (ValueKind::Categorical, TargetPart::Whole | TargetPart::CategoricalOnly) => Some(vec![Categorical]),
        (ValueKind::UnivariateRegression, TargetPart::Whole | TargetPart::NumericalOnly) => Some(vec![Numerical]),
        (ValueKind::MultivariateRegression, TargetPart::Whole) => Some(vec![Categorical, Numerical]),
        (ValueKind::MultivariateRegression, TargetPart::CategoricalOnly) => Some(vec![Categorical]),
        (ValueKind::MultivariateRegression, TargetPart::NumericalOnly) => Some(vec![Numerical]),
        _ => None,
    }
}

/// Checks a dependency graph against the dataset's measurements.
///
/// Stage 0 holds functional time-dependent measurements only; every dynamic
/// measurement component (plus `event_type`) appears exactly once, and a
/// multivariate measurement's values never precede its keys.
pub fn validate_dependency_graph(
    graph: &DependencyGraph,
    measurements: &[MeasurementConfig],
) -> Result<DependencyGraph, GraphError> {
    let by_name: HashMap<&str, &MeasurementConfig> = measurements.iter().map(|m| (m.name.as_str(), m)).collect();
    let mut seen: BTreeMap<(String, Component), usize> = BTreeMap::new();

    for (stage, targets) in graph.stages.iter().enumerate() {
        for t in targets {
            let (kind, temporality) = if t.measurement == EVENT_TYPE {
                (ValueKind::Categorical, Temporality::Dynamic)
            } else {
                let m = by_name
                    .get(t.measurement.as_str())
                    .ok_or_else(|| GraphError::UnknownMeasurement(t.measurement.clone()))?;
                (m.value_kind, m.temporality)
            };
            match temporality {
                Temporality::Static => return Err(GraphError::StaticTarget(t.measurement.clone())),
                Temporality::FunctionalTimeDependent if stage != 0 => {
                    return Err(GraphError::StageZeroViolation(format!(
                        "functional measurement `{}` placed in stage {stage}",
                        t.measurement
                    )))
                }
                Temporality::Dynamic if stage == 0 => {
                    return Err(GraphError::StageZeroViolation(format!(
                        "`{}` is not functional_time_dependent",
                        t.measurement
                    )))
                }
                _ => {}
            }
            let comps = components(kind, t.part).ok_or_else(|| GraphError::InvalidPart {
                measurement: t.measurement.clone(),
                part: t.part.as_str().into(),
            })?;
            for c in comps {
                if seen.insert((t.measurement.clone(), c), stage).is_some() {
                    let label = match c {
                        Component::Categorical => "categorical",
                        Component::Numerical => "numerical",
                    };
                    return Err(GraphError::DuplicateTarget(format!("{}:{label}", t.measurement)));
                }
            }
        }
    }

    for ((name, comp), stage) in &seen {
        if *comp == Component::Numerical {
            if let Some(cat_stage) = seen.get(&(name.clone(), Component::Categorical)) {
                if stage < cat_stage {
                    return Err(GraphError::PartOrderViolation(name.clone()));
                }
            }
        }
    }

    let mut required: Vec<(String, ValueKind)> = vec![(EVENT_TYPE.to_string(), ValueKind::Categorical)];
    let mut dynamic: Vec<_> = measurements
        .iter()
        .filter(|m| m.temporality == Temporality::Dynamic)
        .map(|m| (m.name.clone(), m.value_kind))
        .collect();
    dynamic.sort();
    required.extend(dynamic);
    for (name, kind) in required {
        for c in components(kind, TargetPart::Whole).unwrap_or_default() {
            if !seen.contains_key(&(name.clone(), c)) {
                return Err(GraphError::MissingTarget(name));
            }
        }
    }
    Ok(graph.clone())
}
