//! Ground-truth synthetic event streams with known dynamics.
//!
//! An [`OracleSpec`] describes event types with a type-transition matrix,
//! per-type inter-event time laws, per-type measurement menus and a small
//! rule set coupling covariates within an event or across consecutive
//! events. Sampling is deterministic per seed and writes raw source files, a
//! ready-to-build dataset config and a JSON sidecar with exact counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use arrow_array::{ArrayRef, Float64Array, StringArray, UInt64Array};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    DatasetConfig, MeasurementConfig, ModelConfig, SourceConfig, SourceFormat, Temporality, TimeUnit, ValueKind,
};
use crate::metrics;
use crate::tables;
use crate::task::{TaskError, TaskRow, TaskSpec};
use crate::time::MINUTES_PER_YEAR;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle spec: {0}")]
    Spec(String),
    #[error("{path}: {message}")]
    Write { path: String, message: String },
    #[error(transparent)]
    Task(#[from] TaskError),
}

fn spec_err<T>(msg: impl Into<String>) -> Result<T, OracleError> {
    Err(OracleError::Spec(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalSpec {
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DobSpec {
    pub mean_years: f64,
    pub stddev_years: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KeySpec {
    List(Vec<String>),
    Generated {
        count: usize,
        #[serde(default = "default_prefix")]
        prefix: String,
    },
}

fn default_prefix() -> String {
    "k".into()
}

impl KeySpec {
    pub fn keys(&self) -> Vec<String> {
        match self {
            KeySpec::List(v) => v.clone(),
            KeySpec::Generated { count, prefix } => (0..*count).map(|i| format!("{prefix}{i}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticSpec {
    pub name: String,
    pub keys: KeySpec,
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
}

/// Log-normal mixture over minutes; `means` and `stddevs` are in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TteSpec {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
}

/// Rows drawn per event, written in YAML as one of `{fixed: n}`,
/// `{bernoulli: p}` or `{poisson: lambda}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCount", into = "RawCount")]
pub enum CountSpec {
    Fixed(usize),
    Bernoulli(f64),
    Poisson(f64),
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCount {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixed: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bernoulli: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poisson: Option<f64>,
}

impl TryFrom<RawCount> for CountSpec {
    type Error = String;

    fn try_from(r: RawCount) -> Result<Self, String> {
        match (r.fixed, r.bernoulli, r.poisson) {
            (Some(n), None, None) => Ok(CountSpec::Fixed(n)),
            (None, Some(p), None) => Ok(CountSpec::Bernoulli(p)),
            (None, None, Some(l)) => Ok(CountSpec::Poisson(l)),
            _ => Err("count needs exactly one of fixed, bernoulli, poisson".into()),
        }
    }
}

impl From<CountSpec> for RawCount {
    fn from(c: CountSpec) -> Self {
        match c {
            CountSpec::Fixed(n) => RawCount {
                fixed: Some(n),
                ..Default::default()
            },
            CountSpec::Bernoulli(p) => RawCount {
                bernoulli: Some(p),
                ..Default::default()
            },
            CountSpec::Poisson(l) => RawCount {
                poisson: Some(l),
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MenuItem {
    pub measurement: String,
    pub count: CountSpec,
    /// Draw distinct keys (uniformly) within one event.
    #[serde(default)]
    pub distinct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTypeSpec {
    pub name: String,
    #[serde(default)]
    pub initial: f64,
    /// Next-type probabilities; empty means "redraw from the initial law".
    #[serde(default)]
    pub transitions: BTreeMap<String, f64>,
    /// Inter-event time after an event of this type; exponential at
    /// `base_rate` when absent.
    #[serde(default)]
    pub tte: Option<TteSpec>,
    #[serde(default)]
    pub menu: Vec<MenuItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleMeasurement {
    pub name: String,
    pub kind: ValueKind,
    /// Source table; defaults to the parent's table for companions and to
    /// the measurement name otherwise.
    #[serde(default)]
    pub table: Option<String>,
    #[serde(default)]
    pub keys: Option<KeySpec>,
    #[serde(default)]
    pub key_probs: Option<Vec<f64>>,
    #[serde(default)]
    pub value: Option<NormalSpec>,
    #[serde(default)]
    pub key_values: BTreeMap<String, NormalSpec>,
    /// Generated once on every row of the named measurement instead of from
    /// a menu.
    #[serde(default)]
    pub companion_of: Option<String>,
    #[serde(default)]
    pub min_frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    /// The companion `target`'s value is `map[key of source] + noise·N(0,1)`.
    ValueFromKey {
        source: String,
        target: String,
        map: BTreeMap<String, f64>,
        #[serde(default)]
        noise: f64,
    },
    /// Within one event, every `target_key` value equals `factor` times the
    /// first `source_key` value.
    ValueScale {
        measurement: String,
        source_key: String,
        target_key: String,
        factor: f64,
    },
    /// An event holding `key` of `measurement` is followed by `next_type`
    /// with probability `prob`; otherwise the transition matrix applies.
    TriggerNextType {
        measurement: String,
        key: String,
        next_type: String,
        prob: f64,
    },
}

/// "Does an event of `target_type` occur within `horizon_minutes` of the
/// prompt end?"
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleTask {
    pub name: String,
    pub target_type: String,
    pub horizon_minutes: f64,
    #[serde(default = "one_usize")]
    pub min_prompt_events: usize,
    #[serde(default = "default_mc")]
    pub n_mc: usize,
}

fn one_usize() -> usize {
    1
}
fn default_mc() -> usize {
    20_000
}
fn default_rate() -> f64 {
    1.0
}
fn default_max_events() -> usize {
    50
}
fn default_start() -> f64 {
    // 2020-01-01T00:00Z
    26_297_280.0
}
fn default_spread() -> f64 {
    365.0
}
fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_format() -> SourceFormat {
    SourceFormat::Csv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub n_subjects: usize,
    #[serde(default)]
    pub seed: u64,
    /// Events per day for types without a `tte` law.
    #[serde(default = "default_rate")]
    pub base_rate: f64,
    /// Observation window per subject; unbounded when absent.
    #[serde(default)]
    pub window_days: Option<f64>,
    #[serde(default = "default_max_events")]
    pub max_events_per_subject: usize,
    #[serde(default = "default_format")]
    pub format: SourceFormat,
    #[serde(default = "default_start")]
    pub start_minutes: f64,
    #[serde(default = "default_spread")]
    pub start_spread_days: f64,
    #[serde(default)]
    pub dob: Option<DobSpec>,
    /// Registered functional features to include in the dataset config.
    #[serde(default)]
    pub functional: Vec<String>,
    #[serde(default)]
    pub static_measurements: Vec<StaticSpec>,
    pub event_types: Vec<EventTypeSpec>,
    #[serde(default)]
    pub measurements: Vec<OracleMeasurement>,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub task: Option<OracleTask>,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    /// Copied into the generated dataset config.
    #[serde(default)]
    pub model: Option<ModelConfig>,
}

impl OracleSpec {
    pub fn from_yaml(text: &str) -> Result<Self, OracleError> {
        serde_yaml::from_str(text).map_err(|e| OracleError::Spec(e.to_string()))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("spec serializes")
    }
}

/// One sampled covariate. Observations sharing `row` within an event are
/// written to the same table row.
#[derive(Debug, Clone, PartialEq)]
pub struct Obs {
    pub measurement: usize,
    pub row: u32,
    pub key: Option<u32>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledEvent {
    pub time: f64,
    pub event_type: usize,
    pub obs: Vec<Obs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSubject {
    pub subject_id: u64,
    pub dob: Option<f64>,
    /// Key index per static measurement.
    pub statics: Vec<u32>,
    pub events: Vec<SampledEvent>,
}

struct KeyLaw {
    keys: Vec<String>,
    dist: Option<WeightedIndex<f64>>,
}

impl KeyLaw {
    fn new(keys: Vec<String>, probs: Option<&Vec<f64>>, what: &str) -> Result<Self, OracleError> {
        if keys.is_empty() {
            return spec_err(format!("`{what}` has no keys"));
        }
        let dist = match probs {
            Some(p) if p.len() != keys.len() => return spec_err(format!("`{what}` key_probs length mismatch")),
            Some(p) => Some(WeightedIndex::new(p).map_err(|e| OracleError::Spec(format!("`{what}`: {e}")))?),
            None => None,
        };
        Ok(Self { keys, dist })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match &self.dist {
            Some(d) => d.sample(rng) as u32,
            None => rng.gen_range(0..self.keys.len()) as u32,
        }
    }

    fn probs(&self) -> Vec<f64> {
        let n = self.keys.len();
        match &self.dist {
            None => vec![1.0 / n as f64; n],
            Some(_) => Vec::new(),
        }
    }
}

struct Tte {
    weights: WeightedIndex<f64>,
    components: Vec<LogNormal<f64>>,
}

struct CompiledMenu {
    measurement: usize,
    count: CountSpec,
    distinct: bool,
}

struct Trigger {
    measurement: usize,
    key: u32,
    next_type: usize,
    prob: f64,
}

/// Validated, index-resolved form of an [`OracleSpec`].
pub struct Oracle {
    pub spec: OracleSpec,
    type_index: HashMap<String, usize>,
    measurement_index: HashMap<String, usize>,
    tables: Vec<String>,
    table_of: Vec<usize>,
    keys: Vec<Option<KeyLaw>>,
    statics: Vec<KeyLaw>,
    companions: Vec<Vec<usize>>,
    /// `target -> (source, value per source key, noise)`.
    value_from_key: HashMap<usize, (usize, Vec<f64>, f64)>,
    scale_rules: Vec<(usize, u32, u32, f64)>,
    triggers: Vec<Trigger>,
    initial: WeightedIndex<f64>,
    transitions: Vec<Option<WeightedIndex<f64>>>,
    tte: Vec<Option<Tte>>,
    menus: Vec<Vec<CompiledMenu>>,
    exp: Exp<f64>,
}

fn check_prob(p: f64, what: &str) -> Result<(), OracleError> {
    if !(0.0..=1.0).contains(&p) {
        return spec_err(format!("{what} must be a probability, got {p}"));
    }
    Ok(())
}

impl Oracle {
    pub fn new(spec: OracleSpec) -> Result<Self, OracleError> {
        if spec.event_types.is_empty() {
            return spec_err("at least one event type is required");
        }
        if !(spec.base_rate > 0.0) {
            return spec_err("base_rate must be positive");
        }
        if spec.window_days.is_some_and(|w| !(w > 0.0)) {
            return spec_err("window_days must be positive");
        }
        let mut type_index = HashMap::new();
        for (i, t) in spec.event_types.iter().enumerate() {
            if type_index.insert(t.name.clone(), i).is_some() {
                return spec_err(format!("duplicate event type `{}`", t.name));
            }
        }
        let mut measurement_index = HashMap::new();
        for (i, m) in spec.measurements.iter().enumerate() {
            if measurement_index.insert(m.name.clone(), i).is_some() {
                return spec_err(format!("duplicate measurement `{}`", m.name));
            }
        }
        for s in &spec.static_measurements {
            if measurement_index.contains_key(&s.name) {
                return spec_err(format!("duplicate measurement `{}`", s.name));
            }
        }
        for f in &spec.functional {
            if !crate::config::REGISTERED_FUNCTIONAL.contains(&f.as_str()) {
                return spec_err(format!("unknown functional feature `{f}`"));
            }
            if f == "age" && spec.dob.is_none() {
                return spec_err("`age` requires a dob distribution");
            }
        }

        // Measurements, companions and tables.
        let n = spec.measurements.len();
        let mut companions = vec![Vec::new(); n];
        let mut keys = Vec::with_capacity(n);
        for (i, m) in spec.measurements.iter().enumerate() {
            if let Some(parent) = &m.companion_of {
                let Some(&p) = measurement_index.get(parent) else {
                    return spec_err(format!("`{}` is a companion of unknown `{parent}`", m.name));
                };
                if spec.measurements[p].companion_of.is_some() {
                    return spec_err(format!("`{}` is a companion of a companion", m.name));
                }
                companions[p].push(i);
            }
            let law = if m.kind.has_keys() {
                let Some(k) = &m.keys else {
                    return spec_err(format!("`{}` needs keys", m.name));
                };
                Some(KeyLaw::new(k.keys(), m.key_probs.as_ref(), &m.name)?)
            } else {
                None
            };
            if m.kind.has_values() && m.value.is_none() && m.key_values.is_empty() {
                let ruled = spec
                    .rules
                    .iter()
                    .any(|r| matches!(r, Rule::ValueFromKey { target, .. } if target == &m.name));
                if !ruled {
                    return spec_err(format!("`{}` needs a value law", m.name));
                }
            }
            for v in m.key_values.values().chain(m.value.iter()) {
                if !(v.stddev >= 0.0) {
                    return spec_err(format!("`{}` has a negative stddev", m.name));
                }
            }
            keys.push(law);
        }
        let mut tables: Vec<String> = Vec::new();
        let mut table_of = Vec::with_capacity(n);
        for m in &spec.measurements {
            let name = m
                .table
                .clone()
                .or_else(|| {
                    m.companion_of.as_ref().map(|p| {
                        spec.measurements[measurement_index[p]]
                            .table
                            .clone()
                            .unwrap_or_else(|| p.clone())
                    })
                })
                .unwrap_or_else(|| m.name.clone());
            if name == "subjects" || name == "events" {
                return spec_err(format!("table name `{name}` is reserved"));
            }
            let pos = match tables.iter().position(|t| *t == name) {
                Some(p) => p,
                None => {
                    tables.push(name);
                    tables.len() - 1
                }
            };
            table_of.push(pos);
        }
        for (i, m) in spec.measurements.iter().enumerate() {
            if let Some(p) = &m.companion_of {
                if table_of[i] != table_of[measurement_index[p]] {
                    return spec_err(format!("companion `{}` must share its parent's table", m.name));
                }
            }
        }
        let statics = spec
            .static_measurements
            .iter()
            .map(|s| KeyLaw::new(s.keys.keys(), s.probs.as_ref(), &s.name))
            .collect::<Result<Vec<_>, _>>()?;

        // Rules.
        let find_m = |name: &str| -> Result<usize, OracleError> {
            measurement_index
                .get(name)
                .copied()
                .ok_or_else(|| OracleError::Spec(format!("rule references unknown measurement `{name}`")))
        };
        let key_of = |m: usize, key: &str| -> Result<u32, OracleError> {
            keys[m]
                .as_ref()
                .and_then(|l| l.keys.iter().position(|k| k == key))
                .map(|p| p as u32)
                .ok_or_else(|| OracleError::Spec(format!("unknown key `{key}` of `{}`", spec.measurements[m].name)))
        };
        let mut value_from_key = HashMap::new();
        let mut scale_rules = Vec::new();
        let mut triggers = Vec::new();
        for r in &spec.rules {
            match r {
                Rule::ValueFromKey {
                    source,
                    target,
                    map,
                    noise,
                } => {
                    let (s, t) = (find_m(source)?, find_m(target)?);
                    if spec.measurements[t].companion_of.as_deref() != Some(source.as_str()) {
                        return spec_err(format!("`{target}` must be a companion of `{source}`"));
                    }
                    if !spec.measurements[t].kind.has_values() || !spec.measurements[s].kind.has_keys() {
                        return spec_err("value_from_key needs a keyed source and a numeric target".to_string());
                    }
                    let law = keys[s].as_ref().expect("keyed source");
                    let mut values = Vec::with_capacity(law.keys.len());
                    for k in &law.keys {
                        match map.get(k) {
                            Some(v) => values.push(*v),
                            None => return spec_err(format!("value_from_key map misses key `{k}`")),
                        }
                    }
                    if !(*noise >= 0.0) {
                        return spec_err("value_from_key noise must be non-negative");
                    }
                    value_from_key.insert(t, (s, values, *noise));
                }
                Rule::ValueScale {
                    measurement,
                    source_key,
                    target_key,
                    factor,
                } => {
                    let m = find_m(measurement)?;
                    if spec.measurements[m].kind != ValueKind::MultivariateRegression {
                        return spec_err("value_scale needs a multivariate measurement");
                    }
                    scale_rules.push((m, key_of(m, source_key)?, key_of(m, target_key)?, *factor));
                }
                Rule::TriggerNextType {
                    measurement,
                    key,
                    next_type,
                    prob,
                } => {
                    let m = find_m(measurement)?;
                    check_prob(*prob, "trigger prob")?;
                    let Some(&t) = type_index.get(next_type) else {
                        return spec_err(format!("unknown event type `{next_type}`"));
                    };
                    triggers.push(Trigger {
                        measurement: m,
                        key: key_of(m, key)?,
                        next_type: t,
                        prob: *prob,
                    });
                }
            }
        }

        // Type dynamics.
        let init: Vec<f64> = spec.event_types.iter().map(|t| t.initial).collect();
        let init = if init.iter().all(|&w| w == 0.0) {
            vec![1.0; init.len()]
        } else {
            init
        };
        let initial = WeightedIndex::new(&init).map_err(|e| OracleError::Spec(format!("initial law: {e}")))?;
        let mut transitions = Vec::new();
        let mut tte = Vec::new();
        let mut menus = Vec::new();
        for t in &spec.event_types {
            if t.transitions.is_empty() {
                transitions.push(None);
            } else {
                let mut row = vec![0.0; spec.event_types.len()];
                for (name, p) in &t.transitions {
                    let Some(&j) = type_index.get(name) else {
                        return spec_err(format!("unknown event type `{name}` in transitions"));
                    };
                    check_prob(*p, "transition")?;
                    row[j] = *p;
                }
                if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return spec_err(format!("transitions of `{}` do not sum to 1", t.name));
                }
                transitions.push(Some(
                    WeightedIndex::new(&row).map_err(|e| OracleError::Spec(e.to_string()))?,
                ));
            }
            match &t.tte {
                None => tte.push(None),
                Some(law) => {
                    let k = law.weights.len();
                    if k == 0 || law.means.len() != k || law.stddevs.len() != k {
                        return spec_err(format!("tte of `{}` has mismatched lengths", t.name));
                    }
                    if (law.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || law.stddevs.iter().any(|s| !(*s > 0.0)) {
                        return spec_err(format!(
                            "tte of `{}` needs weights summing to 1 and positive stddevs",
                            t.name
                        ));
                    }
                    tte.push(Some(Tte {
                        weights: WeightedIndex::new(&law.weights).map_err(|e| OracleError::Spec(e.to_string()))?,
                        components: law
                            .means
                            .iter()
                            .zip(&law.stddevs)
                            .map(|(m, s)| LogNormal::new(*m, *s).expect("validated"))
                            .collect(),
                    }));
                }
            }
            let mut menu = Vec::new();
            for item in &t.menu {
                let m = find_m(&item.measurement)?;
                if spec.measurements[m].companion_of.is_some() {
                    return spec_err(format!("companion `{}` cannot appear in a menu", item.measurement));
                }
                match item.count {
                    CountSpec::Bernoulli(p) => check_prob(p, "bernoulli count")?,
                    CountSpec::Poisson(l) if !(l > 0.0) => return spec_err("poisson count must be positive"),
                    CountSpec::Fixed(c) if item.distinct && keys[m].as_ref().is_some_and(|k| k.keys.len() < c) => {
                        return spec_err(format!("`{}` has fewer keys than the distinct count", item.measurement))
                    }
                    _ => {}
                }
                if item.distinct && !spec.measurements[m].kind.has_keys() {
                    return spec_err("distinct draws need a keyed measurement");
                }
                menu.push(CompiledMenu {
                    measurement: m,
                    count: item.count,
                    distinct: item.distinct,
                });
            }
            menus.push(menu);
        }
        if let Some(task) = &spec.task {
            if !type_index.contains_key(&task.target_type) {
                return spec_err(format!("task targets unknown event type `{}`", task.target_type));
            }
            if !(task.horizon_minutes > 0.0) || task.n_mc == 0 || task.min_prompt_events == 0 {
                return spec_err("task needs a positive horizon, n_mc and min_prompt_events");
            }
        }
        let exp = Exp::new(spec.base_rate / 1440.0).expect("positive rate");
        Ok(Self {
            spec,
            type_index,
            measurement_index,
            tables,
            table_of,
            keys,
            statics,
            companions,
            value_from_key,
            scale_rules,
            triggers,
            initial,
            transitions,
            tte,
            menus,
            exp,
        })
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.type_index.get(name).copied()
    }

    pub fn measurement_index(&self, name: &str) -> Option<usize> {
        self.measurement_index.get(name).copied()
    }

    pub fn key_name(&self, measurement: usize, key: u32) -> &str {
        &self.keys[measurement].as_ref().expect("keyed measurement").keys[key as usize]
    }

    fn sample_value<R: Rng>(&self, m: usize, key: Option<u32>, source_key: Option<u32>, rng: &mut R) -> f64 {
        if let (Some((_, values, noise)), Some(k)) = (self.value_from_key.get(&m), source_key) {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            return values[k as usize] + noise * z;
        }
        let spec = &self.spec.measurements[m];
        let law = key
            .and_then(|k| spec.key_values.get(self.key_name(m, k)))
            .or(spec.value.as_ref())
            .copied()
            .unwrap_or(NormalSpec { mean: 0.0, stddev: 1.0 });
        if law.stddev == 0.0 {
            law.mean
        } else {
            Normal::new(law.mean, law.stddev).expect("validated").sample(rng)
        }
    }

    fn sample_count<R: Rng>(count: CountSpec, rng: &mut R) -> usize {
        match count {
            CountSpec::Fixed(n) => n,
            CountSpec::Bernoulli(p) => rng.gen_bool(p) as usize,
            CountSpec::Poisson(l) => Poisson::new(l).expect("validated").sample(rng) as usize,
        }
    }

    /// Covariates of one event of type `ty`.
    pub fn sample_content<R: Rng>(&self, ty: usize, rng: &mut R) -> Vec<Obs> {
        let mut obs = Vec::new();
        let mut row = 0u32;
        for item in &self.menus[ty] {
            let m = item.measurement;
            let n = Self::sample_count(item.count, rng);
            let drawn: Vec<Option<u32>> = match &self.keys[m] {
                Some(law) if item.distinct => index::sample(rng, law.keys.len(), n.min(law.keys.len()))
                    .into_iter()
                    .map(|k| Some(k as u32))
                    .collect(),
                Some(law) => (0..n).map(|_| Some(law.sample(rng))).collect(),
                None => vec![None; n],
            };
            for key in drawn {
                let kind = self.spec.measurements[m].kind;
                let value = kind.has_values().then(|| self.sample_value(m, key, None, rng));
                obs.push(Obs {
                    measurement: m,
                    row,
                    key,
                    value,
                });
                for &c in &self.companions[m] {
                    let ckind = self.spec.measurements[c].kind;
                    let ckey = self.keys[c].as_ref().map(|l| l.sample(rng));
                    let cvalue = ckind.has_values().then(|| self.sample_value(c, ckey, key, rng));
                    obs.push(Obs {
                        measurement: c,
                        row,
                        key: ckey,
                        value: cvalue,
                    });
                }
                row += 1;
            }
        }
        for &(m, sk, tk, factor) in &self.scale_rules {
            let src = obs
                .iter()
                .find(|o| o.measurement == m && o.key == Some(sk))
                .and_then(|o| o.value);
            if let Some(v) = src {
                for o in obs.iter_mut().filter(|o| o.measurement == m && o.key == Some(tk)) {
                    o.value = Some(factor * v);
                }
            }
        }
        obs
    }

    /// Type of the event following an event of type `ty` with covariates `obs`.
    pub fn next_type<R: Rng>(&self, ty: usize, obs: &[Obs], rng: &mut R) -> usize {
        for t in &self.triggers {
            if obs
                .iter()
                .any(|o| o.measurement == t.measurement && o.key == Some(t.key))
            {
                if rng.gen_bool(t.prob) {
                    return t.next_type;
                }
                break;
            }
        }
        match &self.transitions[ty] {
            Some(d) => d.sample(rng),
            None => self.initial.sample(rng),
        }
    }

    /// Minutes until the event after one of type `ty`.
    pub fn sample_delta<R: Rng>(&self, ty: usize, rng: &mut R) -> f64 {
        match &self.tte[ty] {
            Some(t) => t.components[t.weights.sample(rng)].sample(rng),
            None => self.exp.sample(rng),
        }
    }

    /// True log density of the gap after an event of type `ty`.
    pub fn tte_log_density(&self, ty: usize, delta: f64) -> f64 {
        match &self.spec.event_types[ty].tte {
            Some(t) => metrics::lognormal_mixture_log_pdf(delta, &t.weights, &t.means, &t.stddevs),
            None => {
                let rate = self.spec.base_rate / 1440.0;
                if delta < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    rate.ln() - rate * delta
                }
            }
        }
    }

    /// Variance of a `value_from_key` target under its source's key law,
    /// in raw units (uniform key laws only).
    pub fn value_from_key_variance(&self, target: &str) -> Option<f64> {
        let t = self.measurement_index(target)?;
        let (s, values, noise) = self.value_from_key.get(&t)?;
        let p = self.keys[*s].as_ref()?.probs();
        if p.is_empty() {
            return None;
        }
        let mean: f64 = p.iter().zip(values).map(|(p, v)| p * v).sum();
        let var: f64 = p.iter().zip(values).map(|(p, v)| p * (v - mean) * (v - mean)).sum();
        Some(var + noise * noise)
    }

    fn subject_rng(&self, i: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(((i as u64) << 1) | stream);
        rng
    }

    pub fn sample_subject(&self, i: usize) -> SampledSubject {
        let mut rng = self.subject_rng(i, 0);
        let t0 = self.spec.start_minutes + rng.gen::<f64>() * self.spec.start_spread_days * 1440.0;
        let dob = self.spec.dob.as_ref().map(|d| {
            let age = Normal::new(d.mean_years, d.stddev_years.max(0.0))
                .map(|n| n.sample(&mut rng))
                .unwrap_or(d.mean_years)
                .max(0.0);
            t0 - age * MINUTES_PER_YEAR
        });
        let statics = self.statics.iter().map(|l| l.sample(&mut rng)).collect();
        let end = self.spec.window_days.map(|w| t0 + w * 1440.0);
        let mut events = Vec::new();
        let mut ty = self.initial.sample(&mut rng);
        let mut t = if self.tte[ty].is_some() {
            t0
        } else {
            t0 + self.exp.sample(&mut rng)
        };
        while events.len() < self.spec.max_events_per_subject && end.is_none_or(|e| t <= e) {
            let obs = self.sample_content(ty, &mut rng);
            let next = self.next_type(ty, &obs, &mut rng);
            let dt = self.sample_delta(ty, &mut rng);
            events.push(SampledEvent {
                time: t,
                event_type: ty,
                obs,
            });
            ty = next;
            t += dt;
        }
        SampledSubject {
            subject_id: i as u64 + 1,
            dob,
            statics,
            events,
        }
    }

    /// All subjects, sampled in parallel with per-subject streams.
    pub fn sample_subjects(&self) -> Vec<SampledSubject> {
        (0..self.spec.n_subjects)
            .into_par_iter()
            .map(|i| self.sample_subject(i))
            .collect()
    }

    /// Monte-Carlo probability that `target` occurs within `horizon` minutes
    /// after an event of type `ty` holding `obs`.
    pub fn hit_probability<R: Rng>(
        &self,
        ty: usize,
        obs: &[Obs],
        target: usize,
        horizon: f64,
        n_mc: usize,
        rng: &mut R,
    ) -> f64 {
        let mut hits = 0usize;
        for _ in 0..n_mc {
            let mut cur_ty = ty;
            let mut cur_obs = obs.to_vec();
            let mut t = 0.0;
            loop {
                let next = self.next_type(cur_ty, &cur_obs, rng);
                t += self.sample_delta(cur_ty, rng);
                if t > horizon {
                    break;
                }
                if next == target {
                    hits += 1;
                    break;
                }
                cur_obs = self.sample_content(next, rng);
                cur_ty = next;
            }
        }
        hits as f64 / n_mc as f64
    }

    /// Everything the continuation law depends on: the event type and which
    /// trigger rules fire.
    fn state_key(&self, ty: usize, obs: &[Obs]) -> (usize, Vec<bool>) {
        let fired = self
            .triggers
            .iter()
            .map(|t| {
                obs.iter()
                    .any(|o| o.measurement == t.measurement && o.key == Some(t.key))
            })
            .collect();
        (ty, fired)
    }

    /// Task cohort over sampled subjects with Bayes-optimal probabilities.
    /// Rows whose label the data cannot resolve are skipped and counted.
    pub fn task_truth(&self, subjects: &[SampledSubject]) -> Option<TaskTruth> {
        let task = self.spec.task.as_ref()?;
        let target = self.type_index[&task.target_type];
        let h = task.horizon_minutes;
        let mut rows = Vec::new();
        let mut states = Vec::new();
        let mut unresolved = 0;
        for (i, s) in subjects.iter().enumerate() {
            let n = s.events.len();
            if n < task.min_prompt_events + 1 {
                continue;
            }
            let mut rng = self.subject_rng(i, 1);
            let p = rng.gen_range(task.min_prompt_events - 1..n - 1);
            let t_end = s.events[p].time;
            let after = &s.events[p + 1..];
            let hit = after.iter().any(|e| e.event_type == target && e.time <= t_end + h);
            let resolved = hit || after.last().is_some_and(|e| e.time > t_end + h);
            if !resolved {
                unresolved += 1;
                continue;
            }
            rows.push(TaskRow {
                subject_id: s.subject_id,
                prompt_end_time: t_end,
                label: hit as u8,
            });
            states.push(self.state_key(s.events[p].event_type, &s.events[p].obs));
        }
        let mut cache: BTreeMap<(usize, Vec<bool>), f64> = BTreeMap::new();
        let unique: HashSet<(usize, Vec<bool>)> = states.iter().cloned().collect();
        let mut unique: Vec<_> = unique.into_iter().collect();
        unique.sort();
        let probs: Vec<((usize, Vec<bool>), f64)> = unique
            .into_par_iter()
            .map(|key| {
                let exemplar = subjects
                    .iter()
                    .flat_map(|s| s.events.iter())
                    .find(|e| self.state_key(e.event_type, &e.obs) == key)
                    .expect("state observed");
                let mut seed = self.spec.seed ^ 0x5eed_0f_7a5c;
                seed = seed.wrapping_mul(31).wrapping_add(key.0 as u64);
                for &f in &key.1 {
                    seed = seed.wrapping_mul(31).wrapping_add(f as u64);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = self.hit_probability(key.0, &exemplar.obs, target, h, task.n_mc, &mut rng);
                (key, p)
            })
            .collect();
        cache.extend(probs);
        let probabilities: Vec<f64> = states.iter().map(|k| cache[k]).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.label == 1).collect();
        Some(TaskTruth {
            name: task.name.clone(),
            horizon_minutes: h,
            bayes_auroc: metrics::auroc(&probabilities, &labels),
            rows,
            probabilities,
            n_unresolved: unresolved,
        })
    }

    fn column_names(&self, m: usize) -> (String, Option<String>) {
        let spec = &self.spec.measurements[m];
        match spec.kind {
            ValueKind::MultivariateRegression => (spec.name.clone(), Some(format!("{}_value", spec.name))),
            _ => (spec.name.clone(), None),
        }
    }

    /// Dataset config reading the files [`Oracle::write`] produces.
    pub fn dataset_config(&self) -> DatasetConfig {
        let ext = match self.spec.format {
            SourceFormat::Csv => "csv",
            SourceFormat::Parquet => "parquet",
        };
        let source = |name: &str, ts: bool| SourceConfig {
            name: name.into(),
            path: PathBuf::from(format!("{name}.{ext}")),
            format: self.spec.format,
            subject_id_column: "subject_id".into(),
            timestamp_column: ts.then(|| "timestamp".into()),
            event_type: None,
            event_type_column: None,
            dob_column: None,
        };
        let mut sources = vec![
            SourceConfig {
                dob_column: self.spec.dob.as_ref().map(|_| "dob".into()),
                ..source("subjects", false)
            },
            SourceConfig {
                event_type_column: Some("event_type".into()),
                ..source("events", true)
            },
        ];
        sources.extend(self.tables.iter().map(|t| source(t, true)));
        let mut measurements = Vec::new();
        for s in &self.spec.static_measurements {
            measurements.push(MeasurementConfig {
                name: s.name.clone(),
                temporality: Temporality::Static,
                value_kind: ValueKind::Categorical,
                min_frequency: 0,
                censor_bounds: None,
                source_table: Some("subjects".into()),
                key_column: Some(s.name.clone()),
                value_column: None,
            });
        }
        for f in &self.spec.functional {
            measurements.push(MeasurementConfig {
                name: f.clone(),
                temporality: Temporality::FunctionalTimeDependent,
                value_kind: if f == "age" {
                    ValueKind::UnivariateRegression
                } else {
                    ValueKind::Categorical
                },
                min_frequency: 0,
                censor_bounds: None,
                source_table: None,
                key_column: None,
                value_column: None,
            });
        }
        for (i, m) in self.spec.measurements.iter().enumerate() {
            let (key, value) = self.column_names(i);
            measurements.push(MeasurementConfig {
                name: m.name.clone(),
                temporality: Temporality::Dynamic,
                value_kind: m.kind,
                min_frequency: m.min_frequency,
                censor_bounds: None,
                source_table: Some(self.tables[self.table_of[i]].clone()),
                key_column: Some(key),
                value_column: value,
            });
        }
        DatasetConfig {
            sources,
            measurements,
            split_fractions: self.spec.split_fractions,
            seed: self.spec.seed,
            outlier_stddev_cutoff: 5.0,
            time_unit: TimeUnit::Minutes,
            model: self.spec.model.clone(),
        }
    }

    /// Samples and writes raw sources, `dataset.yaml`, the task files (when
    /// configured) and `sidecar.json` into `out`.
    pub fn write(&self, out: &Path) -> Result<Sidecar, OracleError> {
        let subjects = self.sample_subjects();
        self.write_subjects(&subjects, out)
    }

    pub fn write_subjects(&self, subjects: &[SampledSubject], out: &Path) -> Result<Sidecar, OracleError> {
        let werr = |p: &Path, e: String| OracleError::Write {
            path: p.display().to_string(),
            message: e,
        };
        std::fs::create_dir_all(out).map_err(|e| werr(out, e.to_string()))?;
        let config = self.dataset_config();
        let mut table_rows = BTreeMap::new();

        // subjects
        let mut cols: Vec<(String, Column)> = vec![(
            "subject_id".into(),
            Column::Id(subjects.iter().map(|s| s.subject_id).collect()),
        )];
        if self.spec.dob.is_some() {
            cols.push(("dob".into(), Column::Num(subjects.iter().map(|s| s.dob).collect())));
        }
        for (j, st) in self.spec.static_measurements.iter().enumerate() {
            cols.push((
                st.name.clone(),
                Column::Str(
                    subjects
                        .iter()
                        .map(|s| Some(self.statics[j].keys[s.statics[j] as usize].clone()))
                        .collect(),
                ),
            ));
        }
        table_rows.insert("subjects".to_string(), subjects.len() as u64);
        self.write_table(&out.join(&config.sources[0].path), cols)?;

        // events
        let mut ids = Vec::new();
        let mut times = Vec::new();
        let mut types = Vec::new();
        let mut type_counts: BTreeMap<String, u64> = BTreeMap::new();
        for s in subjects {
            for e in &s.events {
                ids.push(s.subject_id);
                times.push(Some(e.time));
                let name = &self.spec.event_types[e.event_type].name;
                types.push(Some(name.clone()));
                *type_counts.entry(name.clone()).or_default() += 1;
            }
        }
        table_rows.insert("events".to_string(), ids.len() as u64);
        let n_events = ids.len() as u64;
        self.write_table(
            &out.join(&config.sources[1].path),
            vec![
                ("subject_id".into(), Column::Id(ids)),
                ("timestamp".into(), Column::Num(times)),
                ("event_type".into(), Column::Str(types)),
            ],
        )?;

        // measurement tables
        let mut measurement_counts: BTreeMap<String, u64> =
            self.spec.measurements.iter().map(|m| (m.name.clone(), 0)).collect();
        for (ti, table) in self.tables.iter().enumerate() {
            let members: Vec<usize> = (0..self.spec.measurements.len())
                .filter(|&m| self.table_of[m] == ti)
                .collect();
            let mut ids = Vec::new();
            let mut times = Vec::new();
            let mut cells: Vec<Vec<Option<String>>> = Vec::new();
            let mut values: Vec<Vec<Option<f64>>> = Vec::new();
            // Column layout: per member, a key/str column then optional value column.
            let mut slots: HashMap<usize, (Option<usize>, Option<usize>)> = HashMap::new();
            let mut names: Vec<(String, bool)> = Vec::new();
            for &m in &members {
                let (k, v) = self.column_names(m);
                let kind = self.spec.measurements[m].kind;
                let key_slot = match kind {
                    ValueKind::UnivariateRegression => None,
                    _ => {
                        names.push((k.clone(), false));
                        cells.push(Vec::new());
                        Some(cells.len() - 1)
                    }
                };
                let value_slot = match kind {
                    ValueKind::Categorical => None,
                    ValueKind::UnivariateRegression => {
                        names.push((k, true));
                        values.push(Vec::new());
                        Some(values.len() - 1)
                    }
                    ValueKind::MultivariateRegression => {
                        names.push((v.expect("value column"), true));
                        values.push(Vec::new());
                        Some(values.len() - 1)
                    }
                };
                slots.insert(m, (key_slot, value_slot));
            }
            for s in subjects {
                for e in &s.events {
                    let mut rows: BTreeMap<u32, Vec<&Obs>> = BTreeMap::new();
                    for o in e.obs.iter().filter(|o| self.table_of[o.measurement] == ti) {
                        rows.entry(o.row).or_default().push(o);
                    }
                    for obs in rows.values() {
                        ids.push(s.subject_id);
                        times.push(Some(e.time));
                        for c in cells.iter_mut() {
                            c.push(None);
                        }
                        for v in values.iter_mut() {
                            v.push(None);
                        }
                        for o in obs {
                            let (ks, vs) = slots[&o.measurement];
                            if let (Some(ks), Some(k)) = (ks, o.key) {
                                *cells[ks].last_mut().expect("row") = Some(self.key_name(o.measurement, k).to_string());
                            }
                            if let (Some(vs), Some(v)) = (vs, o.value) {
                                *values[vs].last_mut().expect("row") = Some(v);
                            }
                            *measurement_counts
                                .get_mut(&self.spec.measurements[o.measurement].name)
                                .expect("known") += 1;
                        }
                    }
                }
            }
            table_rows.insert(table.clone(), ids.len() as u64);
            let mut cols = vec![
                ("subject_id".to_string(), Column::Id(ids)),
                ("timestamp".to_string(), Column::Num(times)),
            ];
            let (mut ci, mut vi) = (cells.into_iter(), values.into_iter());
            for (name, numeric) in names {
                let col = if numeric {
                    Column::Num(vi.next().expect("value column"))
                } else {
                    Column::Str(ci.next().expect("key column"))
                };
                cols.push((name, col));
            }
            let path = config.source(table).expect("table source").path.clone();
            self.write_table(&out.join(path), cols)?;
        }

        let yaml_path = out.join("dataset.yaml");
        std::fs::write(&yaml_path, config.to_yaml()).map_err(|e| werr(&yaml_path, e.to_string()))?;

        let task = match self.task_truth(subjects) {
            Some(truth) => {
                let spec = TaskSpec {
                    name: truth.name.clone(),
                    horizon_minutes: truth.horizon_minutes,
                    rows: truth.rows.clone(),
                };
                spec.write(out)?;
                Some(truth)
            }
            None => None,
        };

        let n_observations = n_events + measurement_counts.values().sum::<u64>();
        let sidecar = Sidecar {
            seed: self.spec.seed,
            n_subjects: subjects.len(),
            n_subjects_with_events: subjects.iter().filter(|s| !s.events.is_empty()).count(),
            n_events,
            n_observations,
            measurement_counts,
            event_type_counts: type_counts,
            table_rows,
            task,
            spec: self.spec.clone(),
        };
        let path = out.join("sidecar.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )
        .map_err(|e| werr(&path, e.to_string()))?;
        Ok(sidecar)
    }

    fn write_table(&self, path: &Path, cols: Vec<(String, Column)>) -> Result<(), OracleError> {
        let werr = |e: String| OracleError::Write {
            path: path.display().to_string(),
            message: e,
        };
        match self.spec.format {
            SourceFormat::Parquet => {
                let arrays: Vec<(String, ArrayRef)> = cols
                    .into_iter()
                    .map(|(n, c)| {
                        let a: ArrayRef = match c {
                            Column::Id(v) => Arc::new(UInt64Array::from(v)),
                            Column::Num(v) => Arc::new(Float64Array::from(v)),
                            Column::Str(v) => Arc::new(StringArray::from(v)),
                        };
                        (n, a)
                    })
                    .collect();
                tables::write_parquet(path, arrays.iter().map(|(n, a)| (n.as_str(), a.clone())).collect()).map_err(werr)
            }
            SourceFormat::Csv => {
                let mut w = csv::Writer::from_path(path).map_err(|e| werr(e.to_string()))?;
                w.write_record(cols.iter().map(|(n, _)| n.as_str()))
                    .map_err(|e| werr(e.to_string()))?;
                let n = cols.first().map(|(_, c)| c.len()).unwrap_or(0);
                let mut record = Vec::with_capacity(cols.len());
                for r in 0..n {
                    record.clear();
                    for (_, c) in &cols {
                        record.push(c.cell(r));
                    }
                    w.write_record(&record).map_err(|e| werr(e.to_string()))?;
                }
                w.flush().map_err(|e| werr(e.to_string()))
            }
        }
    }
}

enum Column {
    Id(Vec<u64>),
    Num(Vec<Option<f64>>),
    Str(Vec<Option<String>>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Id(v) => v.len(),
            Column::Num(v) => v.len(),
            Column::Str(v) => v.len(),
        }
    }

    fn cell(&self, r: usize) -> String {
        match self {
            Column::Id(v) => v[r].to_string(),
            Column::Num(v) => v[r].map(|x| x.to_string()).unwrap_or_default(),
            Column::Str(v) => v[r].clone().unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTruth {
    pub name: String,
    pub horizon_minutes: f64,
    pub rows: Vec<TaskRow>,
    /// Bayes-optimal probability per row.
    pub probabilities: Vec<f64>,
    pub bayes_auroc: Option<f64>,
    pub n_unresolved: usize,
}

impl TaskTruth {
    /// Bayes reference AUROC restricted to `subjects`.
    pub fn auroc_for(&self, subjects: &HashSet<u64>) -> Option<f64> {
        let (p, l): (Vec<f64>, Vec<bool>) = self
            .rows
            .iter()
            .zip(&self.probabilities)
            .filter(|(r, _)| subjects.contains(&r.subject_id))
            .map(|(r, p)| (*p, r.label == 1))
            .unzip();
        metrics::auroc(&p, &l)
    }
}

/// Ground-truth bookkeeping written next to the generated sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_subjects_with_events: usize,
    pub n_events: u64,
    /// Events plus measurement observations (functional features excluded).
    pub n_observations: u64,
    pub measurement_counts: BTreeMap<String, u64>,
    pub event_type_counts: BTreeMap<String, u64>,
    pub table_rows: BTreeMap<String, u64>,
    pub task: Option<TaskTruth>,
    pub spec: OracleSpec,
}

impl Sidecar {
    pub fn read(path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path).map_err(|e| OracleError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| OracleError::Spec(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(yaml: &str) -> Oracle {
        Oracle::new(OracleSpec::from_yaml(yaml).unwrap()).unwrap()
    }

    #[test]
    fn rejects_bad_transitions() {
        let s = OracleSpec::from_yaml("n_subjects: 1\nevent_types:\n  - {name: A, transitions: {A: 0.5}}\n").unwrap();
        assert!(matches!(Oracle::new(s), Err(OracleError::Spec(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        let y = "n_subjects: 5\nseed: 3\nevent_types:\n  - {name: A}\nwindow_days: 10\n";
        let a = spec(y).sample_subjects();
        let b = spec(y).sample_subjects();
        assert_eq!(a, b);
        let c = spec(&y.replace("seed: 3", "seed: 4")).sample_subjects();
        assert_ne!(a, c);
    }

    #[test]
    fn value_scale_rule_holds() {
        let o = spec(
            r#"
n_subjects: 20
max_events_per_subject: 5
event_types:
  - name: A
    menu: [{measurement: lab, count: {fixed: 2}, distinct: true}]
measurements:
  - name: lab
    kind: multivariate_regression
    keys: [A, B]
    value: {mean: 5, stddev: 2}
rules:
  - {rule: value_scale, measurement: lab, source_key: B, target_key: A, factor: 2}
"#,
        );
        for s in o.sample_subjects() {
            for e in &s.events {
                let b = e.obs.iter().find(|x| x.key == Some(1)).unwrap().value.unwrap();
                let a = e.obs.iter().find(|x| x.key == Some(0)).unwrap().value.unwrap();
                assert_eq!(a, 2.0 * b);
            }
        }
    }

    #[test]
    fn history_free_task_scores_half() {
        let o = spec(
            r#"
n_subjects: 300
max_events_per_subject: 6
event_types:
  - {name: A, tte: {weights: [1], means: [4.0], stddevs: [0.5]}}
task: {name: t, target_type: A, horizon_minutes: 55, n_mc: 500}
"#,
        );
        let truth = o.task_truth(&o.sample_subjects()).unwrap();
        assert!(truth.rows.iter().any(|r| r.label == 1) && truth.rows.iter().any(|r| r.label == 0));
        assert_eq!(truth.bayes_auroc, Some(0.5));
    }

    #[test]
    fn deterministic_trigger_task_scores_one() {
        let o = spec(
            r#"
n_subjects: 300
max_events_per_subject: 6
event_types:
  - name: A
    transitions: {A: 1.0}
    tte: {weights: [1], means: [3.912], stddevs: [0.01]}
    menu: [{measurement: sig, count: {bernoulli: 0.5}}]
  - name: X
    transitions: {A: 1.0}
    tte: {weights: [1], means: [3.912], stddevs: [0.01]}
measurements:
  - {name: sig, kind: categorical, keys: ["on"]}
rules:
  - {rule: trigger_next_type, measurement: sig, key: "on", next_type: X, prob: 1.0}
task: {name: t, target_type: X, horizon_minutes: 75, n_mc: 500}
"#,
        );
        let truth = o.task_truth(&o.sample_subjects()).unwrap();
        assert_eq!(truth.bayes_auroc, Some(1.0));
    }
}
