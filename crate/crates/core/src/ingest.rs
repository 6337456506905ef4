//! Extraction of raw sources and compilation into the three-table internal
//! data model (subjects, events, dynamic measurements).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use arrow_array::builder::{Float64Builder, StringBuilder, UInt32Builder};
use arrow_array::{ArrayRef, Float64Array, StringArray, UInt32Array, UInt64Array};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{DatasetConfig, MeasurementConfig, SourceConfig, SourceFormat, Temporality};
use crate::tables;
use crate::time::{parse_minutes, ts_key, EPOCH};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("source `{source_name}` ({path}): {message}")]
    Io {
        source_name: String,
        path: PathBuf,
        message: String,
    },
    #[error("source `{source_name}` row {row}: {message}")]
    Format {
        source_name: String,
        row: usize,
        message: String,
    },
    #[error("source `{source_name}` row {row}: measurement for unknown subject {subject_id}")]
    OrphanSubject {
        source_name: String,
        row: usize,
        subject_id: u64,
    },
    #[error("internal model table {0}")]
    Table(String),
}

/// A raw source after extraction: typed key columns plus the string cells
/// of every column a measurement reads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTable {
    pub source: String,
    pub subject_ids: Vec<u64>,
    pub timestamps: Option<Vec<f64>>,
    pub event_types: Option<Vec<Option<String>>>,
    pub dob: Option<Vec<Option<f64>>>,
    pub columns: BTreeMap<String, Vec<Option<String>>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    fn cell(&self, column: &str, row: usize) -> Option<&str> {
        self.columns.get(column).and_then(|c| c[row].as_deref())
    }
}

/// Maps a raw subject identifier to an unsigned integer. Decimal ids keep
/// their value; anything else is hashed into the upper half of the range.
pub fn canonical_subject_id(raw: &str) -> u64 {
    let s = raw.trim();
    if let Ok(v) = s.parse::<u64>() {
        if v < 1 << 63 {
            return v;
        }
    }
    let digest = Sha256::digest(s.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes) | 1 << 63
}

fn needed_columns(source: &SourceConfig, measurements: &[MeasurementConfig]) -> Vec<String> {
    let mut cols: BTreeSet<String> = BTreeSet::new();
    for m in measurements
        .iter()
        .filter(|m| m.source_table.as_deref() == Some(source.name.as_str()))
    {
        cols.extend(m.key_column.iter().cloned());
        cols.extend(m.value_column.iter().cloned());
    }
    cols.into_iter().collect()
}

struct TableBuilder<'a> {
    source: &'a SourceConfig,
    table: RawTable,
}

impl<'a> TableBuilder<'a> {
    fn new(source: &'a SourceConfig, columns: &[String]) -> Self {
        let table = RawTable {
            source: source.name.clone(),
            timestamps: source.timestamp_column.as_ref().map(|_| Vec::new()),
            event_types: source.event_type_column.as_ref().map(|_| Vec::new()),
            dob: source.dob_column.as_ref().map(|_| Vec::new()),
            columns: columns.iter().map(|c| (c.clone(), Vec::new())).collect(),
            ..RawTable::default()
        };
        Self { source, table }
    }

    fn err(&self, row: usize, message: String) -> IngestError {
        IngestError::Format {
            source_name: self.source.name.clone(),
            row,
            message,
        }
    }

    /// Appends one row; `get` resolves a column name to the row's cell.
    fn push<'c>(&mut self, row: usize, get: impl Fn(&str) -> Option<&'c str>) -> Result<(), IngestError> {
        let sid = get(&self.source.subject_id_column)
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| self.err(row, "empty subject id".into()))?;
        self.table.subject_ids.push(canonical_subject_id(sid));
        if let Some(col) = &self.source.timestamp_column {
            let cell = get(col).unwrap_or("");
            let t = parse_minutes(cell).ok_or_else(|| self.err(row, format!("unparseable timestamp `{cell}`")))?;
            self.table.timestamps.as_mut().unwrap().push(t);
        }
        if let Some(col) = &self.source.event_type_column {
            let v = get(col).filter(|s| !s.is_empty()).map(str::to_string);
            self.table.event_types.as_mut().unwrap().push(v);
        }
        if let Some(col) = &self.source.dob_column {
            let cell = get(col).unwrap_or("");
            let v = if cell.trim().is_empty() {
                None
            } else {
                Some(parse_minutes(cell).ok_or_else(|| self.err(row, format!("unparseable date of birth `{cell}`")))?)
            };
            self.table.dob.as_mut().unwrap().push(v);
        }
        for (name, values) in self.table.columns.iter_mut() {
            values.push(get(name).filter(|s| !s.is_empty()).map(str::to_string));
        }
        Ok(())
    }
}

fn io_err(source: &SourceConfig, message: impl ToString) -> IngestError {
    IngestError::Io {
        source_name: source.name.clone(),
        path: source.path.clone(),
        message: message.to_string(),
    }
}

fn required_columns(source: &SourceConfig, extra: &[String]) -> Vec<String> {
    let mut cols = vec![source.subject_id_column.clone()];
    cols.extend(source.timestamp_column.iter().cloned());
    cols.extend(source.event_type_column.iter().cloned());
    cols.extend(source.dob_column.iter().cloned());
    cols.extend(extra.iter().cloned());
    let mut seen = HashSet::new();
    cols.retain(|c| seen.insert(c.clone()));
    cols
}

fn read_csv(source: &SourceConfig, columns: &[String]) -> Result<RawTable, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&source.path)
        .map_err(|e| io_err(source, e))?;
    let headers = reader.headers().map_err(|e| io_err(source, e))?.clone();
    let mut index = HashMap::new();
    for col in required_columns(source, columns) {
        let pos = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| IngestError::Format {
                source_name: source.name.clone(),
                row: 0,
                message: format!("missing column `{col}` in header"),
            })?;
        index.insert(col, pos);
    }
    let mut builder = TableBuilder::new(source, columns);
    let mut record = csv::StringRecord::new();
    let mut row = 0;
    loop {
        match reader.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(builder.err(row + 1, e.to_string())),
        }
        row += 1;
        let rec = &record;
        builder.push(row, |c| index.get(c).and_then(|&i| rec.get(i)))?;
    }
    Ok(builder.table)
}

fn read_parquet_source(source: &SourceConfig, columns: &[String]) -> Result<RawTable, IngestError> {
    let cols = required_columns(source, columns);
    let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let batches = tables::read_parquet(&source.path, Some(&refs)).map_err(|e| io_err(source, e))?;
    let mut builder = TableBuilder::new(source, columns);
    let mut row = 0;
    for batch in batches {
        let mut cells: HashMap<&str, Vec<Option<String>>> = HashMap::new();
        for c in &refs {
            let array = batch
                .column_by_name(c)
                .ok_or_else(|| io_err(source, format!("missing column `{c}`")))?;
            cells.insert(c, tables::column_as_strings(array).map_err(|e| io_err(source, e))?);
        }
        for i in 0..batch.num_rows() {
            row += 1;
            builder.push(row, |c| cells.get(c).and_then(|v| v[i].as_deref()))?;
        }
    }
    Ok(builder.table)
}

/// Reads every configured source, in parallel, keyed by source name.
pub fn extract_sources(config: &DatasetConfig) -> Result<BTreeMap<String, RawTable>, IngestError> {
    let tables: Vec<Result<RawTable, IngestError>> = config
        .sources
        .par_iter()
        .map(|s| {
            let cols = needed_columns(s, &config.measurements);
            match s.format {
                SourceFormat::Csv => read_csv(s, &cols),
                SourceFormat::Parquet => read_parquet_source(s, &cols),
            }
        })
        .collect();
    tables.into_iter().map(|t| t.map(|t| (t.source.clone(), t))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: u64,
    /// Date of birth, minutes since the epoch.
    pub dob: Option<f64>,
    /// Raw static keys by measurement name.
    pub static_values: BTreeMap<String, String>,
    /// Vocabulary indices of the static keys, filled by pre-processing.
    pub static_indices: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub event_id: u64,
    pub subject_id: u64,
    pub timestamp: f64,
    pub event_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub measurement_id: u64,
    pub event_id: u64,
    /// Index into [`InternalDataModel::measurement_names`].
    pub measurement: u32,
    pub key: Option<String>,
    pub key_index: Option<u32>,
    pub numeric_value: Option<f64>,
}

/// Subjects, events and dynamic measurements, sorted by
/// `(subject_id, timestamp, event_type)` with event ids assigned in that order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InternalDataModel {
    pub measurement_names: Vec<String>,
    pub subjects: Vec<SubjectRecord>,
    pub events: Vec<EventRow>,
    pub measurements: Vec<MeasurementRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub schema_version: u32,
    pub epoch: String,
    pub config_hash: String,
    pub n_subjects: usize,
    pub n_events: usize,
    pub n_measurements: usize,
    pub measurement_names: Vec<String>,
}

impl InternalDataModel {
    pub fn measurement_index(&self, name: &str) -> Option<u32> {
        self.measurement_names.iter().position(|n| n == name).map(|i| i as u32)
    }

    /// Half-open row ranges into `events` for each subject, in subject order.
    pub fn subject_event_ranges(&self) -> Vec<(u64, std::ops::Range<usize>)> {
        let mut out = Vec::with_capacity(self.subjects.len());
        let mut start = 0;
        for s in &self.subjects {
            let mut end = start;
            while end < self.events.len() && self.events[end].subject_id == s.subject_id {
                end += 1;
            }
            out.push((s.subject_id, start..end));
            start = end;
        }
        out
    }

    /// Half-open row ranges into `measurements` for each event.
    pub fn event_measurement_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.events.len());
        let mut start = 0;
        for e in &self.events {
            let mut end = start;
            while end < self.measurements.len() && self.measurements[end].event_id == e.event_id {
                end += 1;
            }
            out.push(start..end);
            start = end;
        }
        out
    }

    /// Checks the table invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let subjects: HashSet<u64> = self.subjects.iter().map(|s| s.subject_id).collect();
        for w in self.subjects.windows(2) {
            if w[0].subject_id >= w[1].subject_id {
                return Err("subjects not sorted".into());
            }
        }
        let mut ids = HashSet::new();
        for (i, e) in self.events.iter().enumerate() {
            if !ids.insert(e.event_id) {
                return Err(format!("duplicate event id {}", e.event_id));
            }
            if !subjects.contains(&e.subject_id) {
                return Err(format!("event {} has unknown subject", e.event_id));
            }
            if i > 0 {
                let p = &self.events[i - 1];
                if (p.subject_id, ts_key(p.timestamp), p.event_id) >= (e.subject_id, ts_key(e.timestamp), e.event_id) {
                    return Err(format!("events out of order at {}", e.event_id));
                }
            }
        }
        for m in &self.measurements {
            if !ids.contains(&m.event_id) {
                return Err(format!("measurement {} references unknown event", m.measurement_id));
            }
            if m.key.is_none() && m.key_index.is_none() && m.numeric_value.is_none() {
                return Err(format!("measurement {} is empty", m.measurement_id));
            }
        }
        Ok(())
    }

    pub fn metadata(&self, config_hash: &str) -> ModelMetadata {
        ModelMetadata {
            schema_version: SCHEMA_VERSION,
            epoch: EPOCH.into(),
            config_hash: config_hash.into(),
            n_subjects: self.subjects.len(),
            n_events: self.events.len(),
            n_measurements: self.measurements.len(),
            measurement_names: self.measurement_names.clone(),
        }
    }

    /// Writes `subjects.parquet`, `events.parquet`, `measurements.parquet`
    /// and the `internal_model.json` sidecar.
    pub fn write_dir(&self, dir: &Path, config_hash: &str) -> Result<(), IngestError> {
        let t = |e: String| IngestError::Table(e);
        std::fs::create_dir_all(dir).map_err(|e| t(e.to_string()))?;

        let statics: BTreeSet<&String> = self
            .subjects
            .iter()
            .flat_map(|s| s.static_values.keys().chain(s.static_indices.keys()))
            .collect();
        let mut cols: Vec<(String, ArrayRef)> = vec![
            (
                "subject_id".into(),
                Arc::new(UInt64Array::from_iter_values(
                    self.subjects.iter().map(|s| s.subject_id),
                )),
            ),
            (
                "dob".into(),
                Arc::new(Float64Array::from_iter(self.subjects.iter().map(|s| s.dob))),
            ),
        ];
        for name in statics {
            let mut keys = StringBuilder::new();
            let mut idx = UInt32Builder::new();
            for s in &self.subjects {
                keys.append_option(s.static_values.get(name));
                idx.append_option(s.static_indices.get(name).copied());
            }
            cols.push((format!("static:{name}"), Arc::new(keys.finish())));
            cols.push((format!("static_index:{name}"), Arc::new(idx.finish())));
        }
        let cols_ref = cols.iter().map(|(n, a)| (n.as_str(), a.clone())).collect();
        tables::write_parquet(&dir.join("subjects.parquet"), cols_ref).map_err(t)?;

        tables::write_parquet(
            &dir.join("events.parquet"),
            vec![
                (
                    "event_id",
                    Arc::new(UInt64Array::from_iter_values(self.events.iter().map(|e| e.event_id))),
                ),
                (
                    "subject_id",
                    Arc::new(UInt64Array::from_iter_values(self.events.iter().map(|e| e.subject_id))),
                ),
                (
                    "timestamp",
                    Arc::new(Float64Array::from_iter_values(self.events.iter().map(|e| e.timestamp))),
                ),
                (
                    "event_type",
                    Arc::new(StringArray::from_iter_values(
                        self.events.iter().map(|e| e.event_type.as_str()),
                    )),
                ),
            ],
        )
        .map_err(t)?;

        let mut values = Float64Builder::new();
        for m in &self.measurements {
            values.append_option(m.numeric_value);
        }
        tables::write_parquet(
            &dir.join("measurements.parquet"),
            vec![
                (
                    "measurement_id",
                    Arc::new(UInt64Array::from_iter_values(
                        self.measurements.iter().map(|m| m.measurement_id),
                    )),
                ),
                (
                    "event_id",
                    Arc::new(UInt64Array::from_iter_values(
                        self.measurements.iter().map(|m| m.event_id),
                    )),
                ),
                (
                    "measurement_name",
                    Arc::new(StringArray::from_iter_values(
                        self.measurements
                            .iter()
                            .map(|m| self.measurement_names[m.measurement as usize].as_str()),
                    )),
                ),
                (
                    "key",
                    Arc::new(StringArray::from_iter(
                        self.measurements.iter().map(|m| m.key.as_deref()),
                    )),
                ),
                (
                    "key_index",
                    Arc::new(UInt32Array::from_iter(self.measurements.iter().map(|m| m.key_index))),
                ),
                ("numeric_value", Arc::new(values.finish())),
            ],
        )
        .map_err(t)?;

        let meta = serde_json::to_string_pretty(&self.metadata(config_hash)).expect("metadata serializes");
        std::fs::write(dir.join("internal_model.json"), meta).map_err(|e| t(e.to_string()))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<(Self, ModelMetadata), IngestError> {
        use arrow_array::Array;
        let t = |e: String| IngestError::Table(e);
        let meta: ModelMetadata =
            serde_json::from_slice(&std::fs::read(dir.join("internal_model.json")).map_err(|e| t(e.to_string()))?)
                .map_err(|e| t(e.to_string()))?;
        let mut model = InternalDataModel {
            measurement_names: meta.measurement_names.clone(),
            ..Default::default()
        };

        for b in tables::read_parquet(&dir.join("subjects.parquet"), None).map_err(t)? {
            let ids = tables::column::<UInt64Array>(&b, "subject_id").map_err(t)?;
            let dob = tables::column::<Float64Array>(&b, "dob").map_err(t)?;
            let schema = b.schema();
            let statics: Vec<String> = schema
                .fields()
                .iter()
                .filter_map(|f| f.name().strip_prefix("static:").map(str::to_string))
                .collect();
            for i in 0..b.num_rows() {
                let mut rec = SubjectRecord {
                    subject_id: ids.value(i),
                    dob: (!dob.is_null(i)).then(|| dob.value(i)),
                    static_values: BTreeMap::new(),
                    static_indices: BTreeMap::new(),
                };
                for name in &statics {
                    let k = tables::column::<StringArray>(&b, &format!("static:{name}")).map_err(t)?;
                    let x = tables::column::<UInt32Array>(&b, &format!("static_index:{name}")).map_err(t)?;
                    if !k.is_null(i) {
                        rec.static_values.insert(name.clone(), k.value(i).to_string());
                    }
                    if !x.is_null(i) {
                        rec.static_indices.insert(name.clone(), x.value(i));
                    }
                }
                model.subjects.push(rec);
            }
        }
        for b in tables::read_parquet(&dir.join("events.parquet"), None).map_err(t)? {
            let id = tables::column::<UInt64Array>(&b, "event_id").map_err(t)?;
            let sid = tables::column::<UInt64Array>(&b, "subject_id").map_err(t)?;
            let ts = tables::column::<Float64Array>(&b, "timestamp").map_err(t)?;
            let ty = tables::column::<StringArray>(&b, "event_type").map_err(t)?;
            for i in 0..b.num_rows() {
                model.events.push(EventRow {
                    event_id: id.value(i),
                    subject_id: sid.value(i),
                    timestamp: ts.value(i),
                    event_type: ty.value(i).to_string(),
                });
            }
        }
        let names: HashMap<&str, u32> = meta
            .measurement_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u32))
            .collect();
        for b in tables::read_parquet(&dir.join("measurements.parquet"), None).map_err(t)? {
            let id = tables::column::<UInt64Array>(&b, "measurement_id").map_err(t)?;
            let ev = tables::column::<UInt64Array>(&b, "event_id").map_err(t)?;
            let name = tables::column::<StringArray>(&b, "measurement_name").map_err(t)?;
            let key = tables::column::<StringArray>(&b, "key").map_err(t)?;
            let ki = tables::column::<UInt32Array>(&b, "key_index").map_err(t)?;
            let val = tables::column::<Float64Array>(&b, "numeric_value").map_err(t)?;
            for i in 0..b.num_rows() {
                let m = *names
                    .get(name.value(i))
                    .ok_or_else(|| t(format!("unknown measurement `{}`", name.value(i))))?;
                model.measurements.push(MeasurementRow {
                    measurement_id: id.value(i),
                    event_id: ev.value(i),
                    measurement: m,
                    key: (!key.is_null(i)).then(|| key.value(i).to_string()),
                    key_index: (!ki.is_null(i)).then(|| ki.value(i)),
                    numeric_value: (!val.is_null(i)).then(|| val.value(i)),
                });
            }
        }
        Ok((model, meta))
    }
}

type EventKey = (u64, i64, u32);

struct PendingRow {
    event: EventKey,
    measurement: u32,
    key: Option<String>,
    value: Option<f64>,
}

fn source_event_type(source: &SourceConfig, table: &RawTable, row: usize) -> Option<String> {
    if let Some(t) = &source.event_type {
        return Some(t.clone());
    }
    table
        .event_types
        .as_ref()
        .map(|v| v[row].clone().unwrap_or_else(|| source.name.clone()))
}

/// Joins extracted sources into the internal data model.
///
/// Events are deduplicated on `(subject, timestamp, event_type)`. Rows of
/// sources without an event type attach to the first event at the same
/// subject and timestamp, creating one (typed by the source name) when none
/// exists.
pub fn compile_internal_model(
    raw: &BTreeMap<String, RawTable>,
    config: &DatasetConfig,
) -> Result<InternalDataModel, IngestError> {
    let table = |s: &SourceConfig| raw.get(&s.name).ok_or_else(|| io_err(s, "source was not extracted"));

    // Subjects.
    let defining: Vec<&SourceConfig> = config
        .sources
        .iter()
        .filter(|s| s.is_subject_level() || s.dob_column.is_some())
        .collect();
    let mut subjects: BTreeMap<u64, SubjectRecord> = BTreeMap::new();
    let new_subject = |id| SubjectRecord {
        subject_id: id,
        dob: None,
        static_values: BTreeMap::new(),
        static_indices: BTreeMap::new(),
    };
    let subject_sources: Vec<&SourceConfig> = if defining.is_empty() {
        config.sources.iter().collect()
    } else {
        defining.clone()
    };
    for s in &subject_sources {
        let t = table(s)?;
        for (row, &id) in t.subject_ids.iter().enumerate() {
            let rec = subjects.entry(id).or_insert_with(|| new_subject(id));
            if let (Some(dob), None) = (t.dob.as_ref().and_then(|d| d[row]), rec.dob) {
                rec.dob = Some(dob);
            }
        }
    }
    for m in config
        .measurements
        .iter()
        .filter(|m| m.temporality == Temporality::Static)
    {
        let s = config
            .source(m.source_table.as_deref().unwrap_or_default())
            .expect("validated");
        let t = table(s)?;
        let col = m.key_column.as_deref().expect("validated");
        for (row, id) in t.subject_ids.iter().enumerate() {
            if let (Some(v), Some(rec)) = (t.cell(col, row), subjects.get_mut(id)) {
                rec.static_values.entry(m.name.clone()).or_insert_with(|| v.to_string());
            }
        }
    }
    if !defining.is_empty() {
        for s in config.sources.iter().filter(|s| !s.is_subject_level()) {
            let t = table(s)?;
            if let Some(row) = t.subject_ids.iter().position(|id| !subjects.contains_key(id)) {
                return Err(IngestError::OrphanSubject {
                    source_name: s.name.clone(),
                    row: row + 1,
                    subject_id: t.subject_ids[row],
                });
            }
        }
    }

    // Event types, interned in lexicographic order so ids sort like names.
    let timed: Vec<&SourceConfig> = config.sources.iter().filter(|s| !s.is_subject_level()).collect();
    let mut type_names: BTreeSet<String> = BTreeSet::new();
    for s in &timed {
        let t = table(s)?;
        if s.defines_events() {
            for row in 0..t.len() {
                type_names.extend(source_event_type(s, t, row));
            }
        } else {
            type_names.insert(s.name.clone());
        }
    }
    let type_names: Vec<String> = type_names.into_iter().collect();
    let type_id = |name: &str| type_names.binary_search_by(|n| n.as_str().cmp(name)).expect("interned") as u32;

    let mut keys: Vec<EventKey> = Vec::new();
    let mut times: HashMap<(u64, i64), f64> = HashMap::new();
    for s in timed.iter().filter(|s| s.defines_events()) {
        let t = table(s)?;
        let ts = t.timestamps.as_ref().expect("timed source");
        for row in 0..t.len() {
            let ty = source_event_type(s, t, row).expect("typed source");
            keys.push((t.subject_ids[row], ts_key(ts[row]), type_id(&ty)));
            times.insert((t.subject_ids[row], ts_key(ts[row])), ts[row]);
        }
    }
    keys.sort_unstable();
    keys.dedup();
    let occupied: HashSet<(u64, i64)> = keys.iter().map(|k| (k.0, k.1)).collect();
    let mut claimed: BTreeMap<(u64, i64), u32> = BTreeMap::new();
    for s in timed.iter().filter(|s| !s.defines_events()) {
        let t = table(s)?;
        let ts = t.timestamps.as_ref().expect("timed source");
        let ty = type_id(&s.name);
        for row in 0..t.len() {
            let k = (t.subject_ids[row], ts_key(ts[row]));
            if !occupied.contains(&k) {
                claimed.entry(k).or_insert(ty);
                times.insert(k, ts[row]);
            }
        }
    }
    keys.extend(claimed.iter().map(|(&(s, k), &ty)| (s, k, ty)));
    keys.sort_unstable();

    let find = |key: (u64, i64)| -> EventKey {
        let pos = keys.partition_point(|k| (k.0, k.1) < key);
        keys[pos]
    };

    // Measurement rows, per source in parallel, merged in config order.
    let names: Vec<String> = config.measurements.iter().map(|m| m.name.clone()).collect();
    let per_source: Vec<Result<Vec<PendingRow>, IngestError>> = timed
        .par_iter()
        .map(|s| {
            let t = table(s)?;
            let ts = t.timestamps.as_ref().expect("timed source");
            let ms: Vec<(u32, &MeasurementConfig)> = config
                .measurements
                .iter()
                .enumerate()
                .filter(|(_, m)| m.temporality == Temporality::Dynamic && m.source_table.as_deref() == Some(&s.name))
                .map(|(i, m)| (i as u32, m))
                .collect();
            let mut rows = Vec::new();
            for row in 0..t.len() {
                let event = if s.defines_events() {
                    let ty = source_event_type(s, t, row).expect("typed source");
                    (t.subject_ids[row], ts_key(ts[row]), type_id(&ty))
                } else {
                    find((t.subject_ids[row], ts_key(ts[row])))
                };
                for &(mi, m) in &ms {
                    let key = if m.value_kind.has_keys() {
                        match t.cell(m.key_column.as_deref().unwrap_or_default(), row) {
                            Some(k) => Some(k.to_string()),
                            None => continue,
                        }
                    } else {
                        None
                    };
                    let value = match m.numeric_column().filter(|_| m.value_kind.has_values()) {
                        Some(col) => match t.cell(col, row) {
                            Some(cell) => Some(cell.trim().parse::<f64>().map_err(|_| IngestError::Format {
                                source_name: s.name.clone(),
                                row: row + 1,
                                message: format!("non-numeric value `{cell}` for `{}`", m.name),
                            })?),
                            None => None,
                        },
                        None => None,
                    };
                    if key.is_none() && value.is_none() {
                        continue;
                    }
                    rows.push(PendingRow {
                        event,
                        measurement: mi,
                        key,
                        value,
                    });
                }
            }
            Ok(rows)
        })
        .collect();
    let mut pending = Vec::new();
    for rows in per_source {
        pending.extend(rows?);
    }
    pending.sort_by_key(|r| r.event);

    let events: Vec<EventRow> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| EventRow {
            event_id: i as u64,
            subject_id: k.0,
            timestamp: times[&(k.0, k.1)],
            event_type: type_names[k.2 as usize].clone(),
        })
        .collect();
    for e in &events {
        subjects
            .entry(e.subject_id)
            .or_insert_with(|| new_subject(e.subject_id));
    }
    let measurements = pending
        .into_iter()
        .enumerate()
        .map(|(i, r)| MeasurementRow {
            measurement_id: i as u64,
            event_id: keys.binary_search(&r.event).expect("event exists") as u64,
            measurement: r.measurement,
            key: r.key,
            key_index: None,
            numeric_value: r.value,
        })
        .collect();

    Ok(InternalDataModel {
        measurement_names: names,
        subjects: subjects.into_values().collect(),
        events,
        measurements,
    })
}

/// Extraction followed by compilation.
pub fn ingest(config: &DatasetConfig) -> Result<InternalDataModel, IngestError> {
    let raw = extract_sources(config)?;
    compile_internal_model(&raw, config)
}
