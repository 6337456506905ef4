//! Fitting and applying pre-processing: vocabularies, censoring, outlier
//! removal, normalization and subject-level splits.
//!
//! Everything is fit on the training split only and then applied unchanged
//! to every split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{DatasetConfig, MeasurementConfig, Temporality, ValueKind, EVENT_TYPE};
use crate::functional::{self, RawFunctional, TIME_OF_DAY_BUCKETS};
use crate::ingest::{InternalDataModel, MeasurementRow};

pub const UNK: &str = "UNK";

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("no fit artifact for measurement `{0}`")]
    MissingFitArtifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Tune,
    HeldOut,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Tune, Split::HeldOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Tune => "tune",
            Split::HeldOut => "held_out",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub assignment: BTreeMap<u64, Split>,
}

impl SplitAssignment {
    pub fn get(&self, subject_id: u64) -> Option<Split> {
        self.assignment.get(&subject_id).copied()
    }

    pub fn subjects(&self, split: Split) -> impl Iterator<Item = u64> + '_ {
        self.assignment
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(id, _)| *id)
    }

    pub fn count(&self, split: Split) -> usize {
        self.subjects(split).count()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Assigns subjects to train/tune/held-out.
///
/// Subjects are ranked by a seeded hash of their id and the ranking is cut at
/// the rounded cumulative fractions, so the result depends only on the set of
/// ids and the seed.
pub fn split_subjects(subject_ids: &[u64], fractions: [f64; 3], seed: u64) -> SplitAssignment {
    let mut ranked: Vec<(u64, u64)> = subject_ids
        .iter()
        .map(|&id| (splitmix64(splitmix64(seed) ^ id), id))
        .collect();
    ranked.sort_unstable();
    ranked.dedup();
    let n = ranked.len() as f64;
    let n_train = (fractions[0] * n).round() as usize;
    let n_tune = (((fractions[0] + fractions[1]) * n).round() as usize).max(n_train) - n_train;
    let assignment = ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (_, id))| {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_tune {
                Split::Tune
            } else {
                Split::HeldOut
            };
            (id, split)
        })
        .collect();
    SplitAssignment { seed, assignment }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub measurement_name: String,
    /// Index 0 is always `UNK`.
    pub entries: Vec<String>,
    /// Training-split counts; the `UNK` slot counts occurrences filtered out
    /// as infrequent.
    pub counts: Vec<u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self) -> HashMap<&str, u32> {
        self.entries
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, k)| (k.as_str(), i as u32))
            .collect()
    }

    /// Fixed-order vocabulary (used for bucketed features whose index must
    /// not depend on the data).
    pub fn fixed(name: &str, keys: &[&str], counts: Vec<u64>) -> Self {
        let mut entries = vec![UNK.to_string()];
        entries.extend(keys.iter().map(|k| k.to_string()));
        let mut all = vec![0];
        all.extend(counts);
        Self {
            measurement_name: name.into(),
            entries,
            counts: all,
        }
    }
}

/// Counts keys and keeps those seen at least `min_frequency` times, sorted
/// by descending count with lexicographic tie-breaks, behind `UNK`.
pub fn fit_vocabulary<'a>(name: &str, keys: impl IntoIterator<Item = &'a str>, min_frequency: u64) -> Vocabulary {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for k in keys {
        *counts.entry(k).or_default() += 1;
    }
    let mut kept: Vec<(&str, u64)> = Vec::with_capacity(counts.len());
    let mut dropped = 0;
    for (k, c) in counts {
        if c >= min_frequency {
            kept.push((k, c));
        } else {
            dropped += c;
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut entries = vec![UNK.to_string()];
    let mut out_counts = vec![dropped];
    for (k, c) in kept {
        entries.push(k.to_string());
        out_counts.push(c);
    }
    Vocabulary {
        measurement_name: name.into(),
        entries,
        counts: out_counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub measurement_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub mean: f64,
    pub stddev: f64,
    pub outlier_lo: f64,
    pub outlier_hi: f64,
    pub censor_lo: Option<f64>,
    pub censor_hi: Option<f64>,
    /// Values the moments were computed from.
    pub n: u64,
    pub n_nonfinite: u64,
    pub n_censored: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Nonfinite,
    Censored,
    Outlier,
    /// Not a drop: a categorical key was mapped to `UNK`.
    UnkMapped,
    /// Functional feature skipped because a static field is missing.
    MissingStatic,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Nonfinite => "nonfinite",
            DropReason::Censored => "censored",
            DropReason::Outlier => "outlier",
            DropReason::UnkMapped => "unk_mapped",
            DropReason::MissingStatic => "missing_static",
        }
    }
}

impl NumericStats {
    /// Censors, then checks outlier bounds; returns the standardized value.
    pub fn apply(&self, v: f64) -> Result<f64, DropReason> {
        if !v.is_finite() {
            return Err(DropReason::Nonfinite);
        }
        if self.censor_lo.is_some_and(|lo| v < lo) || self.censor_hi.is_some_and(|hi| v > hi) {
            return Err(DropReason::Censored);
        }
        if v < self.outlier_lo || v > self.outlier_hi {
            return Err(DropReason::Outlier);
        }
        Ok(self.normalize(v))
    }

    /// `(v - mean) / stddev`; constant streams map to 0.
    pub fn normalize(&self, v: f64) -> f64 {
        if self.stddev > 0.0 {
            (v - self.mean) / self.stddev
        } else {
            0.0
        }
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.stddev + self.mean
    }
}

/// Population moments of the censored, finite training values and the
/// `mean ± cutoff·stddev` outlier window.
pub fn fit_numeric_stats(
    name: &str,
    key: Option<&str>,
    values: &[f64],
    censor_bounds: Option<(f64, f64)>,
    cutoff: f64,
) -> NumericStats {
    let mut n_nonfinite = 0;
    let mut n_censored = 0;
    let mut kept = Vec::with_capacity(values.len());
    for &v in values {
        if !v.is_finite() {
            n_nonfinite += 1;
        } else if censor_bounds.is_some_and(|(lo, hi)| v < lo || v > hi) {
            n_censored += 1;
        } else {
            kept.push(v);
        }
    }
    let n = kept.len();
    let (mean, stddev) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = kept.iter().sum::<f64>() / n as f64;
        let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    NumericStats {
        measurement_name: name.into(),
        key: key.map(str::to_string),
        mean,
        stddev,
        outlier_lo: mean - cutoff * stddev,
        outlier_hi: mean + cutoff * stddev,
        censor_lo: censor_bounds.map(|b| b.0),
        censor_hi: censor_bounds.map(|b| b.1),
        n: n as u64,
        n_nonfinite,
        n_censored,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasurementArtifacts {
    Categorical {
        vocabulary: Vocabulary,
    },
    Univariate {
        stats: NumericStats,
    },
    /// Per-key statistics, indexed by vocabulary index.
    Multivariate {
        vocabulary: Vocabulary,
        stats: Vec<NumericStats>,
    },
}

impl MeasurementArtifacts {
    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        match self {
            MeasurementArtifacts::Categorical { vocabulary }
            | MeasurementArtifacts::Multivariate { vocabulary, .. } => Some(vocabulary),
            MeasurementArtifacts::Univariate { .. } => None,
        }
    }
}

/// Everything fit on the training split, serialized as `preprocessing.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingArtifacts {
    pub config_hash: String,
    pub split_seed: u64,
    pub split_counts: BTreeMap<Split, usize>,
    pub measurements: BTreeMap<String, MeasurementArtifacts>,
}

impl PreprocessingArtifacts {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifacts serialize")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn get(&self, name: &str) -> Result<&MeasurementArtifacts, PreprocessError> {
        self.measurements
            .get(name)
            .ok_or_else(|| PreprocessError::MissingFitArtifact(name.into()))
    }
}

fn group_rows<'a>(model: &'a InternalDataModel, train_events: &HashSet<u64>) -> Vec<Vec<&'a MeasurementRow>> {
    let mut by_measurement: Vec<Vec<&MeasurementRow>> = vec![Vec::new(); model.measurement_names.len()];
    for row in &model.measurements {
        if train_events.contains(&row.event_id) {
            by_measurement[row.measurement as usize].push(row);
        }
    }
    by_measurement
}

/// Fits all artifacts from the training split of `model`.
pub fn fit(model: &InternalDataModel, config: &DatasetConfig, split: &SplitAssignment) -> PreprocessingArtifacts {
    let train: HashSet<u64> = split.subjects(Split::Train).collect();
    let train_events: HashSet<u64> = model
        .events
        .iter()
        .filter(|e| train.contains(&e.subject_id))
        .map(|e| e.event_id)
        .collect();
    let rows = group_rows(model, &train_events);
    let dob: HashMap<u64, f64> = model
        .subjects
        .iter()
        .filter_map(|s| s.dob.map(|d| (s.subject_id, d)))
        .collect();
    let cutoff = config.outlier_stddev_cutoff;

    let fit_one = |m: &MeasurementConfig| -> MeasurementArtifacts {
        let idx = model.measurement_index(&m.name);
        let rows: &[&MeasurementRow] = idx.map(|i| rows[i as usize].as_slice()).unwrap_or(&[]);
        match (m.temporality, m.value_kind) {
            (Temporality::FunctionalTimeDependent, ValueKind::Categorical) => {
                let mut counts = vec![0u64; TIME_OF_DAY_BUCKETS.len()];
                for e in model.events.iter().filter(|e| train.contains(&e.subject_id)) {
                    counts[functional::time_of_day_bucket(e.timestamp)] += 1;
                }
                MeasurementArtifacts::Categorical {
                    vocabulary: Vocabulary::fixed(&m.name, &TIME_OF_DAY_BUCKETS, counts),
                }
            }
            (Temporality::FunctionalTimeDependent, _) => {
                let values: Vec<f64> = model
                    .events
                    .iter()
                    .filter(|e| train.contains(&e.subject_id))
                    .filter_map(|e| dob.get(&e.subject_id).map(|d| functional::age_years(e.timestamp, *d)))
                    .collect();
                MeasurementArtifacts::Univariate {
                    stats: fit_numeric_stats(&m.name, None, &values, m.censor_bounds, cutoff),
                }
            }
            (Temporality::Static, _) => {
                let keys = model
                    .subjects
                    .iter()
                    .filter(|s| train.contains(&s.subject_id))
                    .filter_map(|s| s.static_values.get(&m.name).map(String::as_str));
                MeasurementArtifacts::Categorical {
                    vocabulary: fit_vocabulary(&m.name, keys, m.min_frequency),
                }
            }
            (_, ValueKind::Categorical) => MeasurementArtifacts::Categorical {
                vocabulary: fit_vocabulary(&m.name, rows.iter().filter_map(|r| r.key.as_deref()), m.min_frequency),
            },
            (_, ValueKind::UnivariateRegression) => {
                let values: Vec<f64> = rows.iter().filter_map(|r| r.numeric_value).collect();
                MeasurementArtifacts::Univariate {
                    stats: fit_numeric_stats(&m.name, None, &values, m.censor_bounds, cutoff),
                }
            }
            (_, ValueKind::MultivariateRegression) => {
                let vocabulary = fit_vocabulary(&m.name, rows.iter().filter_map(|r| r.key.as_deref()), m.min_frequency);
                let lookup = vocabulary.lookup();
                let mut grouped: Vec<Vec<f64>> = vec![Vec::new(); vocabulary.len()];
                for r in rows {
                    if let (Some(k), Some(v)) = (r.key.as_deref(), r.numeric_value) {
                        grouped[lookup.get(k).copied().unwrap_or(0) as usize].push(v);
                    }
                }
                let stats = grouped
                    .iter()
                    .enumerate()
                    .map(|(i, vals)| {
                        fit_numeric_stats(&m.name, Some(&vocabulary.entries[i]), vals, m.censor_bounds, cutoff)
                    })
                    .collect();
                MeasurementArtifacts::Multivariate { vocabulary, stats }
            }
        }
    };

    let mut measurements: BTreeMap<String, MeasurementArtifacts> = config
        .measurements
        .par_iter()
        .map(|m| (m.name.clone(), fit_one(m)))
        .collect();
    let types = model
        .events
        .iter()
        .filter(|e| train.contains(&e.subject_id))
        .map(|e| e.event_type.as_str());
    measurements.insert(
        EVENT_TYPE.into(),
        MeasurementArtifacts::Categorical {
            vocabulary: fit_vocabulary(EVENT_TYPE, types, 0),
        },
    );
    PreprocessingArtifacts {
        config_hash: config.hash(),
        split_seed: split.seed,
        split_counts: Split::ALL.iter().map(|s| (*s, split.count(*s))).collect(),
        measurements,
    }
}

/// Per `(measurement, reason, split)` row counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropReport {
    pub counts: BTreeMap<(String, DropReason, Split), u64>,
}

impl DropReport {
    pub fn add(&mut self, measurement: &str, reason: DropReason, split: Split) {
        *self.counts.entry((measurement.to_string(), reason, split)).or_default() += 1;
    }

    pub fn total(&self, reason: DropReason) -> u64 {
        self.counts
            .iter()
            .filter(|((_, r, _), _)| *r == reason)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("measurement,reason,split,count\n");
        for ((m, r, s), c) in &self.counts {
            out.push_str(&format!("{m},{},{},{c}\n", r.as_str(), s.as_str()));
        }
        out
    }
}

enum RowOutcome {
    Keep(MeasurementRow, Option<DropReason>),
    Drop(DropReason),
}

/// Applies fit artifacts to every split. Numeric values failing censoring or
/// the outlier window are dropped (whole row for univariate streams, value
/// only for multivariate ones); unseen keys map to `UNK`. Functional features
/// are materialized as measurement rows on every event.
pub fn transform(
    model: &InternalDataModel,
    artifacts: &PreprocessingArtifacts,
    config: &DatasetConfig,
    split: &SplitAssignment,
) -> Result<(InternalDataModel, DropReport), PreprocessError> {
    let mut report = DropReport::default();
    let mut out = InternalDataModel {
        measurement_names: model.measurement_names.clone(),
        ..Default::default()
    };
    let split_of = |sid: u64| split.get(sid).unwrap_or(Split::HeldOut);

    // Static keys.
    let statics: Vec<&MeasurementConfig> = config
        .measurements
        .iter()
        .filter(|m| m.temporality == Temporality::Static)
        .collect();
    let mut static_lookups = Vec::new();
    for m in &statics {
        let vocab = artifacts
            .get(&m.name)?
            .vocabulary()
            .ok_or_else(|| PreprocessError::MissingFitArtifact(m.name.clone()))?;
        static_lookups.push((m.name.as_str(), vocab.lookup()));
    }
    for s in &model.subjects {
        let mut s = s.clone();
        for (name, lookup) in &static_lookups {
            if let Some(k) = s.static_values.get(*name) {
                let idx = lookup.get(k.as_str()).copied().unwrap_or(0);
                if idx == 0 {
                    report.add(name, DropReason::UnkMapped, split_of(s.subject_id));
                }
                s.static_indices.insert(name.to_string(), idx);
            }
        }
        out.subjects.push(s);
    }
    out.events = model.events.clone();

    // Dynamic rows.
    let mut per_measurement: Vec<Option<(&MeasurementArtifacts, HashMap<&str, u32>)>> = Vec::new();
    for (i, name) in model.measurement_names.iter().enumerate() {
        let used = model.measurements.iter().any(|r| r.measurement as usize == i);
        if !used {
            per_measurement.push(None);
            continue;
        }
        let a = artifacts.get(name)?;
        let lookup = a.vocabulary().map(|v| v.lookup()).unwrap_or_default();
        per_measurement.push(Some((a, lookup)));
    }
    let event_subject: HashMap<u64, u64> = model.events.iter().map(|e| (e.event_id, e.subject_id)).collect();
    let outcomes: Vec<RowOutcome> = model
        .measurements
        .par_iter()
        .map(|row| {
            let (a, lookup) = per_measurement[row.measurement as usize]
                .as_ref()
                .expect("used measurement");
            let mut r = row.clone();
            let mut unk = None;
            if let Some(k) = &row.key {
                let idx = lookup.get(k.as_str()).copied().unwrap_or(0);
                if idx == 0 {
                    unk = Some(DropReason::UnkMapped);
                }
                r.key_index = Some(idx);
            }
            match a {
                MeasurementArtifacts::Categorical { .. } => RowOutcome::Keep(r, unk),
                MeasurementArtifacts::Univariate { stats } => match row.numeric_value.map(|v| stats.apply(v)) {
                    Some(Ok(z)) => {
                        r.numeric_value = Some(z);
                        RowOutcome::Keep(r, unk)
                    }
                    Some(Err(reason)) => RowOutcome::Drop(reason),
                    None => RowOutcome::Drop(DropReason::Nonfinite),
                },
                MeasurementArtifacts::Multivariate { stats, .. } => {
                    let st = &stats[r.key_index.unwrap_or(0) as usize];
                    match row.numeric_value.map(|v| st.apply(v)) {
                        Some(Ok(z)) => {
                            r.numeric_value = Some(z);
                            RowOutcome::Keep(r, unk)
                        }
                        Some(Err(reason)) => {
                            r.numeric_value = None;
                            RowOutcome::Keep(r, Some(reason))
                        }
                        None => RowOutcome::Keep(r, unk),
                    }
                }
            }
        })
        .collect();
    for (row, outcome) in model.measurements.iter().zip(outcomes) {
        let name = &model.measurement_names[row.measurement as usize];
        let sp = split_of(event_subject[&row.event_id]);
        match outcome {
            RowOutcome::Keep(r, note) => {
                if let Some(reason) = note {
                    report.add(name, reason, sp);
                }
                out.measurements.push(r);
            }
            RowOutcome::Drop(reason) => report.add(name, reason, sp),
        }
    }

    // Functional features.
    let functional: Vec<&MeasurementConfig> = config.measurements.iter().filter(|m| m.is_functional()).collect();
    if !functional.is_empty() {
        let dob: HashMap<u64, Option<f64>> = model.subjects.iter().map(|s| (s.subject_id, s.dob)).collect();
        let mut next_id = model
            .measurements
            .iter()
            .map(|m| m.measurement_id + 1)
            .max()
            .unwrap_or(0);
        for m in &functional {
            let mi = out
                .measurement_index(&m.name)
                .expect("config measurements are all named in the model");
            let a = artifacts.get(&m.name)?;
            for e in &model.events {
                let raw = functional::evaluate(
                    &m.name,
                    e.timestamp,
                    dob.get(&e.subject_id).copied().flatten(),
                    e.subject_id,
                );
                let (key_index, numeric_value) = match (raw, a) {
                    (Ok(RawFunctional::Bucket(b)), _) => (Some(b as u32 + 1), None),
                    (Ok(RawFunctional::Value(v)), MeasurementArtifacts::Univariate { stats }) => {
                        (None, Some(stats.normalize(v)))
                    }
                    _ => {
                        report.add(&m.name, DropReason::MissingStatic, split_of(e.subject_id));
                        continue;
                    }
                };
                out.measurements.push(MeasurementRow {
                    measurement_id: next_id,
                    event_id: e.event_id,
                    measurement: mi,
                    key: None,
                    key_index,
                    numeric_value,
                });
                next_id += 1;
            }
        }
        out.measurements.sort_by_key(|r| (r.event_id, r.measurement_id));
    }
    Ok((out, report))
}
