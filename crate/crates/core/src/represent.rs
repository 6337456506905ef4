//! Sparse per-subject sequences, batch collation and the default data
//! embedding layer.
//!
//! Every observation is addressed by a global feature index
//! `offset(measurement) + key_index` into one table of size `V`. Index 0 is
//! reserved for padding, so the first measurement block starts at 1.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use arrow_array::builder::{BooleanBuilder, Float64Builder, ListBuilder, UInt32Builder};
use arrow_array::{Array, ArrayRef, BooleanArray, Float64Array, ListArray, UInt32Array, UInt64Array};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{DatasetConfig, Temporality, ValueKind, EVENT_TYPE};
use crate::functional::{self, FunctionalError, RawFunctional};
use crate::ingest::{InternalDataModel, MeasurementRow};
use crate::preprocess::{MeasurementArtifacts, PreprocessError, PreprocessingArtifacts, Split};
use crate::tables;
use crate::Scalar;

pub const PADDING_INDEX: u32 = 0;

#[derive(Debug, Error)]
pub enum RepresentError {
    #[error("subject {0} has no events")]
    EmptySubject(u64),
    #[error("feature index {index} out of range for a table of {rows} rows")]
    IndexOutOfRange { index: u32, rows: usize },
    #[error("embedding table has {got} values, expected {expected}")]
    TableShape { got: usize, expected: usize },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("{0}")]
    Table(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub temporality: Temporality,
    pub kind: ValueKind,
    pub offset: u32,
    pub size: u32,
}

impl LayoutEntry {
    pub fn range(&self) -> Range<u32> {
        self.offset..self.offset + self.size
    }
}

/// Placement of every measurement in the global feature index space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub entries: Vec<LayoutEntry>,
    /// Total table size `V`, padding row included.
    pub vocab_size: u32,
}

impl FeatureLayout {
    /// `event_type` first, then measurements in config order. Keyed
    /// measurements take one slot per vocabulary entry (UNK included);
    /// univariate streams take one slot.
    pub fn build(artifacts: &PreprocessingArtifacts, config: &DatasetConfig) -> Result<Self, RepresentError> {
        let mut entries = Vec::with_capacity(config.measurements.len() + 1);
        let mut offset = 1u32;
        let mut push = |name: &str, temporality, kind| -> Result<(), RepresentError> {
            let size = match artifacts.get(name)? {
                MeasurementArtifacts::Univariate { .. } => 1,
                a => a.vocabulary().map(|v| v.len()).unwrap_or(1) as u32,
            };
            entries.push(LayoutEntry {
                name: name.to_string(),
                temporality,
                kind,
                offset,
                size,
            });
            offset += size;
            Ok(())
        };
        push(EVENT_TYPE, Temporality::Dynamic, ValueKind::Categorical)?;
        for m in &config.measurements {
            push(&m.name, m.temporality, m.value_kind)?;
        }
        Ok(Self {
            entries,
            vocab_size: offset,
        })
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Layout position and local key index of a global feature index.
    pub fn owner(&self, index: u32) -> Option<(usize, u32)> {
        if index == PADDING_INDEX || index >= self.vocab_size {
            return None;
        }
        let pos = self.entries.partition_point(|e| e.offset <= index) - 1;
        Some((pos, index - self.entries[pos].offset))
    }
}

/// Observations of every functional feature at `time`, in layout order:
/// categorical buckets map to `offset + bucket + 1` (behind UNK), regression
/// values are normalized with their fitted statistics.
pub fn functional_observations(
    layout: &FeatureLayout,
    artifacts: &PreprocessingArtifacts,
    time: f64,
    dob: Option<f64>,
    subject_id: u64,
) -> Result<Vec<(u32, Option<f64>)>, FunctionalError> {
    let mut out = Vec::new();
    for e in layout
        .entries
        .iter()
        .filter(|e| e.temporality == Temporality::FunctionalTimeDependent)
    {
        match functional::evaluate(&e.name, time, dob, subject_id)? {
            RawFunctional::Bucket(b) => out.push((e.offset + b as u32 + 1, None)),
            RawFunctional::Value(v) => {
                if let Ok(MeasurementArtifacts::Univariate { stats }) = artifacts.get(&e.name) {
                    out.push((e.offset, Some(stats.normalize(v))));
                }
            }
        }
    }
    Ok(out)
}

/// One subject's full history. Observations are stored CSR-style:
/// event `i` owns `obs_offsets[i]..obs_offsets[i + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSequence {
    pub subject_id: u64,
    pub dob: Option<f64>,
    pub static_indices: Vec<u32>,
    pub event_times: Vec<f64>,
    pub obs_offsets: Vec<u32>,
    pub obs_indices: Vec<u32>,
    /// `NaN` where the observation carries no value.
    pub obs_values: Vec<f64>,
    pub obs_value_mask: Vec<bool>,
}

impl SubjectSequence {
    pub fn n_events(&self) -> usize {
        self.event_times.len()
    }

    pub fn n_observations(&self) -> usize {
        self.obs_indices.len()
    }

    pub fn event_range(&self, i: usize) -> Range<usize> {
        self.obs_offsets[i] as usize..self.obs_offsets[i + 1] as usize
    }

    pub fn event_len(&self, i: usize) -> usize {
        self.event_range(i).len()
    }

    pub fn max_event_len(&self) -> usize {
        (0..self.n_events()).map(|i| self.event_len(i)).max().unwrap_or(0)
    }

    /// Appends one event; observations are `(index, value)` with `None` for
    /// key-only observations.
    pub fn push_event(&mut self, time: f64, obs: impl IntoIterator<Item = (u32, Option<f64>)>) {
        if self.obs_offsets.is_empty() {
            self.obs_offsets.push(0);
        }
        self.event_times.push(time);
        for (idx, v) in obs {
            self.obs_indices.push(idx);
            self.obs_values.push(v.unwrap_or(f64::NAN));
            self.obs_value_mask.push(v.is_some());
        }
        self.obs_offsets.push(self.obs_indices.len() as u32);
    }

    pub fn empty(subject_id: u64, dob: Option<f64>, static_indices: Vec<u32>) -> Self {
        Self {
            subject_id,
            dob,
            static_indices,
            event_times: Vec::new(),
            obs_offsets: vec![0],
            obs_indices: Vec::new(),
            obs_values: Vec::new(),
            obs_value_mask: Vec::new(),
        }
    }

    /// The contiguous sub-sequence of events `window`.
    pub fn slice(&self, window: Range<usize>) -> SubjectSequence {
        let mut out = SubjectSequence::empty(self.subject_id, self.dob, self.static_indices.clone());
        for i in window {
            let r = self.event_range(i);
            out.push_event(
                self.event_times[i],
                r.map(|k| {
                    (
                        self.obs_indices[k],
                        self.obs_value_mask[k].then_some(self.obs_values[k]),
                    )
                }),
            );
        }
        out
    }
}

/// Maps transformed measurement rows to global indices.
pub struct Serializer<'a> {
    layout: &'a FeatureLayout,
    event_type_offset: u32,
    event_type_lookup: HashMap<&'a str, u32>,
    /// Layout entry for each model measurement index.
    by_model_index: Vec<Option<&'a LayoutEntry>>,
    statics: Vec<&'a LayoutEntry>,
}

impl<'a> Serializer<'a> {
    pub fn new(
        layout: &'a FeatureLayout,
        artifacts: &'a PreprocessingArtifacts,
        measurement_names: &[String],
    ) -> Result<Self, RepresentError> {
        let event_type_lookup = artifacts
            .get(EVENT_TYPE)?
            .vocabulary()
            .map(|v| v.lookup())
            .unwrap_or_default();
        let event_type_offset = layout.entry(EVENT_TYPE).map(|e| e.offset).unwrap_or(1);
        Ok(Self {
            layout,
            event_type_offset,
            event_type_lookup,
            by_model_index: measurement_names.iter().map(|n| layout.entry(n)).collect(),
            statics: layout
                .entries
                .iter()
                .filter(|e| e.temporality == Temporality::Static)
                .collect(),
        })
    }

    pub fn layout(&self) -> &FeatureLayout {
        self.layout
    }

    pub fn observation(&self, row: &MeasurementRow) -> Option<(u32, Option<f64>)> {
        let entry = self.by_model_index.get(row.measurement as usize).copied().flatten()?;
        let local = match entry.kind {
            ValueKind::UnivariateRegression => 0,
            _ => row.key_index.unwrap_or(0),
        };
        let value = match entry.kind {
            ValueKind::Categorical => None,
            _ => row.numeric_value.filter(|v| v.is_finite()),
        };
        if entry.kind == ValueKind::UnivariateRegression && value.is_none() {
            return None;
        }
        Some((entry.offset + local, value))
    }

    /// Builds one subject's sequence from its (sorted) events and their rows.
    pub fn serialize_subject(
        &self,
        model: &InternalDataModel,
        subject: usize,
        events: Range<usize>,
        event_rows: &[Range<usize>],
    ) -> Result<SubjectSequence, RepresentError> {
        let s = &model.subjects[subject];
        if events.is_empty() {
            return Err(RepresentError::EmptySubject(s.subject_id));
        }
        let statics = self
            .statics
            .iter()
            .filter_map(|e| s.static_indices.get(&e.name).map(|k| e.offset + k))
            .collect();
        let mut seq = SubjectSequence::empty(s.subject_id, s.dob, statics);
        for ei in events {
            let e = &model.events[ei];
            let ty = self.event_type_lookup.get(e.event_type.as_str()).copied().unwrap_or(0);
            let obs = std::iter::once((self.event_type_offset + ty, None)).chain(
                model.measurements[event_rows[ei].clone()]
                    .iter()
                    .filter_map(|r| self.observation(r)),
            );
            seq.push_event(e.timestamp, obs);
        }
        Ok(seq)
    }

    /// Serializes every subject in parallel; subjects without events are
    /// returned separately.
    pub fn serialize_all(&self, model: &InternalDataModel) -> (Vec<SubjectSequence>, Vec<u64>) {
        let ranges = model.subject_event_ranges();
        let event_rows = model.event_measurement_ranges();
        let results: Vec<Result<SubjectSequence, RepresentError>> = ranges
            .par_iter()
            .enumerate()
            .map(|(i, (_, r))| self.serialize_subject(model, i, r.clone(), &event_rows))
            .collect();
        let mut seqs = Vec::with_capacity(results.len());
        let mut empty = Vec::new();
        for r in results {
            match r {
                Ok(s) => seqs.push(s),
                Err(RepresentError::EmptySubject(id)) => empty.push(id),
                Err(_) => unreachable!("serialize_subject only fails on empty subjects"),
            }
        }
        (seqs, empty)
    }
}

/// Padded batch whose observation axis is the per-batch maximum number of
/// observations in one event, never the vocabulary size.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBatch {
    pub batch_size: usize,
    pub max_events: usize,
    pub max_obs: usize,
    pub subject_ids: Vec<u64>,
    pub dob: Vec<Option<f64>>,
    /// Number of real events per row.
    pub lengths: Vec<usize>,
    /// Index of the first included event in the source sequence.
    pub window_starts: Vec<usize>,
    /// `B×S`.
    pub times: Vec<f64>,
    /// `B×S`; 0 at the first position and on padding.
    pub time_deltas: Vec<f64>,
    /// `B×S`.
    pub event_mask: Vec<bool>,
    /// `B×S×M`; padding uses [`PADDING_INDEX`].
    pub obs_indices: Vec<u32>,
    /// `B×S×M`.
    pub obs_values: Vec<f64>,
    /// `B×S×M`.
    pub obs_value_mask: Vec<bool>,
    pub static_indices: Vec<Vec<u32>>,
}

impl SparseBatch {
    pub fn event_cell(&self, b: usize, s: usize) -> usize {
        b * self.max_events + s
    }

    pub fn obs_range(&self, b: usize, s: usize) -> Range<usize> {
        let start = self.event_cell(b, s) * self.max_obs;
        start..start + self.max_obs
    }

    /// Non-padding observation cells; independent of `V`.
    pub fn payload_cells(&self) -> usize {
        self.obs_indices.iter().filter(|&&i| i != PADDING_INDEX).count()
    }

    /// Cells a dense `B×S×V` multi-hot encoding would need.
    pub fn dense_cells(&self, vocab_size: usize) -> usize {
        self.batch_size * self.max_events * vocab_size
    }

    /// Number of observations in event `(b, s)`.
    pub fn event_len(&self, b: usize, s: usize) -> usize {
        self.obs_indices[self.obs_range(b, s)]
            .iter()
            .take_while(|&&i| i != PADDING_INDEX)
            .count()
    }
}

/// Most recent `max_len` events.
pub fn recent_window(n_events: usize, max_len: usize) -> Range<usize> {
    n_events.saturating_sub(max_len)..n_events
}

/// Uniformly random contiguous window of at most `max_len` events.
pub fn random_window<R: Rng + ?Sized>(n_events: usize, max_len: usize, rng: &mut R) -> Range<usize> {
    if n_events <= max_len {
        return 0..n_events;
    }
    let start = rng.gen_range(0..=n_events - max_len);
    start..start + max_len
}

/// Collates with the most recent window of each sequence.
pub fn collate(seqs: &[&SubjectSequence], max_seq_len: usize) -> SparseBatch {
    let windows: Vec<_> = seqs.iter().map(|s| recent_window(s.n_events(), max_seq_len)).collect();
    collate_windows(seqs, &windows)
}

/// Collates with a random window per sequence (training).
pub fn collate_random<R: Rng + ?Sized>(seqs: &[&SubjectSequence], max_seq_len: usize, rng: &mut R) -> SparseBatch {
    let windows: Vec<_> = seqs
        .iter()
        .map(|s| random_window(s.n_events(), max_seq_len, rng))
        .collect();
    collate_windows(seqs, &windows)
}

pub fn collate_windows(seqs: &[&SubjectSequence], windows: &[Range<usize>]) -> SparseBatch {
    let b = seqs.len();
    let s_max = windows.iter().map(|w| w.len()).max().unwrap_or(0);
    let m_max = seqs
        .iter()
        .zip(windows)
        .flat_map(|(s, w)| w.clone().map(move |i| s.event_len(i)))
        .max()
        .unwrap_or(0);
    let cells = b * s_max;
    let mut batch = SparseBatch {
        batch_size: b,
        max_events: s_max,
        max_obs: m_max,
        subject_ids: seqs.iter().map(|s| s.subject_id).collect(),
        dob: seqs.iter().map(|s| s.dob).collect(),
        lengths: windows.iter().map(|w| w.len()).collect(),
        window_starts: windows.iter().map(|w| w.start).collect(),
        times: vec![0.0; cells],
        time_deltas: vec![0.0; cells],
        event_mask: vec![false; cells],
        obs_indices: vec![PADDING_INDEX; cells * m_max],
        obs_values: vec![0.0; cells * m_max],
        obs_value_mask: vec![false; cells * m_max],
        static_indices: seqs.iter().map(|s| s.static_indices.clone()).collect(),
    };
    for (bi, (seq, w)) in seqs.iter().zip(windows).enumerate() {
        for (si, ei) in w.clone().enumerate() {
            let cell = bi * s_max + si;
            batch.times[cell] = seq.event_times[ei];
            batch.event_mask[cell] = true;
            if si > 0 {
                batch.time_deltas[cell] = seq.event_times[ei] - seq.event_times[ei - 1];
            }
            let base = cell * m_max;
            for (k, oi) in seq.event_range(ei).enumerate() {
                batch.obs_indices[base + k] = seq.obs_indices[oi];
                if seq.obs_value_mask[oi] {
                    batch.obs_values[base + k] = seq.obs_values[oi];
                    batch.obs_value_mask[base + k] = true;
                }
            }
        }
    }
    batch
}

/// Sum-pools value-scaled embeddings per event and adds the summed static
/// embedding to every real event. `table` and `static_table` are row-major
/// `rows×d`; padded events embed to zero. Returns `B×S×d`.
pub fn embed_batch<T: Scalar>(
    batch: &SparseBatch,
    table: &[T],
    static_table: &[T],
    d: usize,
) -> Result<Vec<T>, RepresentError> {
    if d == 0 || !table.len().is_multiple_of(d) || !static_table.len().is_multiple_of(d) {
        return Err(RepresentError::TableShape {
            got: table.len(),
            expected: d,
        });
    }
    let rows = table.len() / d;
    let static_rows = static_table.len() / d;
    let mut out = vec![T::zero(); batch.batch_size * batch.max_events * d];
    for b in 0..batch.batch_size {
        let mut stat = vec![T::zero(); d];
        for &i in &batch.static_indices[b] {
            if i as usize >= static_rows {
                return Err(RepresentError::IndexOutOfRange {
                    index: i,
                    rows: static_rows,
                });
            }
            for (acc, w) in stat.iter_mut().zip(&static_table[i as usize * d..(i as usize + 1) * d]) {
                *acc += *w;
            }
        }
        for s in 0..batch.max_events {
            let cell = batch.event_cell(b, s);
            if !batch.event_mask[cell] {
                continue;
            }
            let dst = &mut out[cell * d..(cell + 1) * d];
            dst.copy_from_slice(&stat);
            for k in batch.obs_range(b, s) {
                let idx = batch.obs_indices[k];
                if idx == PADDING_INDEX {
                    continue;
                }
                if idx as usize >= rows {
                    return Err(RepresentError::IndexOutOfRange { index: idx, rows });
                }
                let scale = if batch.obs_value_mask[k] {
                    T::of(batch.obs_values[k])
                } else {
                    T::one()
                };
                for (acc, w) in dst.iter_mut().zip(&table[idx as usize * d..(idx as usize + 1) * d]) {
                    *acc += *w * scale;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub n_subjects: usize,
    pub n_events: usize,
    pub n_observations: usize,
    pub max_events: usize,
    pub max_obs_per_event: usize,
}

impl SplitSummary {
    pub fn of(seqs: &[SubjectSequence]) -> Self {
        Self {
            n_subjects: seqs.len(),
            n_events: seqs.iter().map(|s| s.n_events()).sum(),
            n_observations: seqs.iter().map(|s| s.n_observations()).sum(),
            max_events: seqs.iter().map(|s| s.n_events()).max().unwrap_or(0),
            max_obs_per_event: seqs.iter().map(|s| s.max_event_len()).max().unwrap_or(0),
        }
    }
}

/// Everything downstream stages need to interpret the sequence files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub vocab_size: u32,
    pub layout: FeatureLayout,
    pub artifacts: PreprocessingArtifacts,
    pub splits: BTreeMap<Split, SplitSummary>,
    pub empty_subjects: Vec<u64>,
    /// Hash of the dataset config and fit artifacts this build came from.
    pub dataset_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl SequenceManifest {
    pub fn new(layout: FeatureLayout, artifacts: PreprocessingArtifacts, config: &DatasetConfig) -> Self {
        let mut h = Sha256::new();
        h.update(config.hash().as_bytes());
        h.update(artifacts.hash().as_bytes());
        Self {
            vocab_size: layout.vocab_size,
            layout,
            artifacts,
            splits: BTreeMap::new(),
            empty_subjects: Vec::new(),
            dataset_hash: hex::encode(h.finalize()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Identity of this manifest, recorded in checkpoints.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn max_events(&self) -> usize {
        self.splits.values().map(|s| s.max_events).max().unwrap_or(0)
    }

    pub fn max_obs_per_event(&self) -> usize {
        self.splits.values().map(|s| s.max_obs_per_event).max().unwrap_or(0)
    }

    pub fn write(&self, dir: &Path) -> Result<(), RepresentError> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|source| RepresentError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(dir: &Path) -> Result<Self, RepresentError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| RepresentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| RepresentError::Table(format!("{}: {e}", path.display())))
    }
}

pub fn sequences_file(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("sequences_{}.parquet", split.as_str()))
}

/// Writes sequences as one row per subject with nested-list columns.
pub fn write_sequences(path: &Path, seqs: &[SubjectSequence]) -> Result<(), RepresentError> {
    let ids: ArrayRef = Arc::new(UInt64Array::from_iter_values(seqs.iter().map(|s| s.subject_id)));
    let dob: ArrayRef = Arc::new(Float64Array::from_iter(seqs.iter().map(|s| s.dob)));
    let mut statics = ListBuilder::new(UInt32Builder::new());
    let mut times = ListBuilder::new(Float64Builder::new());
    let mut idx = ListBuilder::new(ListBuilder::new(UInt32Builder::new()));
    let mut vals = ListBuilder::new(ListBuilder::new(Float64Builder::new()));
    let mut mask = ListBuilder::new(ListBuilder::new(BooleanBuilder::new()));
    for s in seqs {
        statics.values().append_slice(&s.static_indices);
        statics.append(true);
        times.values().append_slice(&s.event_times);
        times.append(true);
        for e in 0..s.n_events() {
            let r = s.event_range(e);
            idx.values().values().append_slice(&s.obs_indices[r.clone()]);
            idx.values().append(true);
            vals.values().values().append_slice(&s.obs_values[r.clone()]);
            vals.values().append(true);
            mask.values().values().append_slice(&s.obs_value_mask[r]);
            mask.values().append(true);
        }
        idx.append(true);
        vals.append(true);
        mask.append(true);
    }
    tables::write_parquet(
        path,
        vec![
            ("subject_id", ids),
            ("dob", dob),
            ("static_indices", Arc::new(statics.finish())),
            ("event_times", Arc::new(times.finish())),
            ("obs_indices", Arc::new(idx.finish())),
            ("obs_values", Arc::new(vals.finish())),
            ("obs_value_mask", Arc::new(mask.finish())),
        ],
    )
    .map_err(RepresentError::Table)
}

fn list_at(list: &ListArray, i: usize) -> ArrayRef {
    list.value(i)
}

fn downcast<A: 'static>(a: &ArrayRef) -> Result<&A, RepresentError> {
    a.as_any()
        .downcast_ref::<A>()
        .ok_or_else(|| RepresentError::Table("sequence column has an unexpected type".into()))
}

pub fn read_sequences(path: &Path) -> Result<Vec<SubjectSequence>, RepresentError> {
    let batches = tables::read_parquet(path, None).map_err(RepresentError::Table)?;
    let mut out = Vec::new();
    for batch in batches {
        let t = |e: String| RepresentError::Table(e);
        let ids = tables::column::<UInt64Array>(&batch, "subject_id").map_err(t)?;
        let dob = tables::column::<Float64Array>(&batch, "dob").map_err(t)?;
        let statics = tables::column::<ListArray>(&batch, "static_indices").map_err(t)?;
        let times = tables::column::<ListArray>(&batch, "event_times").map_err(t)?;
        let idx = tables::column::<ListArray>(&batch, "obs_indices").map_err(t)?;
        let vals = tables::column::<ListArray>(&batch, "obs_values").map_err(t)?;
        let mask = tables::column::<ListArray>(&batch, "obs_value_mask").map_err(t)?;
        for r in 0..batch.num_rows() {
            let st = list_at(statics, r);
            let tm = list_at(times, r);
            let mut seq = SubjectSequence::empty(
                ids.value(r),
                (!dob.is_null(r)).then(|| dob.value(r)),
                downcast::<UInt32Array>(&st)?.values().to_vec(),
            );
            let tm = downcast::<Float64Array>(&tm)?;
            let (ei, ev, em) = (list_at(idx, r), list_at(vals, r), list_at(mask, r));
            let (ei, ev, em) = (
                downcast::<ListArray>(&ei)?,
                downcast::<ListArray>(&ev)?,
                downcast::<ListArray>(&em)?,
            );
            for e in 0..tm.len() {
                let (a, b, c) = (ei.value(e), ev.value(e), em.value(e));
                let a = downcast::<UInt32Array>(&a)?;
                let b = downcast::<Float64Array>(&b)?;
                let c = downcast::<BooleanArray>(&c)?;
                seq.push_event(
                    tm.value(e),
                    (0..a.len()).map(|k| (a.value(k), c.value(k).then(|| b.value(k)))),
                );
            }
            out.push(seq);
        }
    }
    Ok(out)
}
