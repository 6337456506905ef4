//! The full dataset build: ingest, split, fit, transform and serialize.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::DatasetConfig;
use crate::ingest::{self, IngestError, InternalDataModel};
use crate::preprocess::{self, DropReport, PreprocessError, Split, SplitAssignment};
use crate::represent::{
    self, FeatureLayout, RepresentError, SequenceManifest, Serializer, SplitSummary, SubjectSequence,
};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("preprocess: {0}")]
    Preprocess(#[from] PreprocessError),
    #[error("represent: {0}")]
    Represent(#[from] RepresentError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BuildError + '_ {
    move |e| BuildError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub const INTERNAL_DIR: &str = "internal";
pub const SPLITS_FILE: &str = "splits.json";
pub const PREPROCESSING_FILE: &str = "preprocessing.json";
pub const DROP_REPORT_FILE: &str = "drop_report.csv";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildCounts {
    pub n_subjects: usize,
    pub n_events: usize,
    pub n_measurements: usize,
    pub n_observations: usize,
}

#[derive(Debug)]
pub struct BuildOutput {
    pub manifest: SequenceManifest,
    pub splits: SplitAssignment,
    pub drop_report: DropReport,
    pub counts: BuildCounts,
    /// Wall seconds per stage, in run order.
    pub stage_seconds: Vec<(String, f64)>,
}

/// In-memory build result before anything is written.
pub struct Built {
    pub model: InternalDataModel,
    pub transformed: InternalDataModel,
    pub splits: SplitAssignment,
    pub manifest: SequenceManifest,
    pub sequences: BTreeMap<Split, Vec<SubjectSequence>>,
    pub drop_report: DropReport,
    pub stage_seconds: Vec<(String, f64)>,
}

/// Runs every stage in memory.
pub fn build(config: &DatasetConfig) -> Result<Built, BuildError> {
    let mut stage_seconds = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, stage_seconds: &mut Vec<(String, f64)>| {
        stage_seconds.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let model = ingest::ingest(config)?;
    lap("ingest", &mut stage_seconds);

    let ids: Vec<u64> = model.subjects.iter().map(|s| s.subject_id).collect();
    let splits = preprocess::split_subjects(&ids, config.split_fractions, config.seed);
    let artifacts = preprocess::fit(&model, config, &splits);
    lap("fit", &mut stage_seconds);
    let (transformed, drop_report) = preprocess::transform(&model, &artifacts, config, &splits)?;
    lap("transform", &mut stage_seconds);

    let layout = FeatureLayout::build(&artifacts, config)?;
    let serializer = Serializer::new(&layout, &artifacts, &transformed.measurement_names)?;
    let (all, empty) = serializer.serialize_all(&transformed);
    let mut sequences: BTreeMap<Split, Vec<SubjectSequence>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for seq in all {
        let split = splits.get(seq.subject_id).unwrap_or(Split::HeldOut);
        sequences.get_mut(&split).expect("all splits present").push(seq);
    }
    let mut manifest = SequenceManifest::new(layout.clone(), artifacts, config);
    manifest.splits = sequences.iter().map(|(s, v)| (*s, SplitSummary::of(v))).collect();
    manifest.empty_subjects = empty;
    lap("represent", &mut stage_seconds);

    Ok(Built {
        model,
        transformed,
        splits,
        manifest,
        sequences,
        drop_report,
        stage_seconds,
    })
}

impl Built {
    pub fn counts(&self) -> BuildCounts {
        BuildCounts {
            n_subjects: self.model.subjects.len(),
            n_events: self.model.events.len(),
            n_measurements: self.model.measurements.len(),
            n_observations: self.sequences.values().flatten().map(|s| s.n_observations()).sum(),
        }
    }

    /// Writes the dataset directory. Every file is a pure function of the
    /// config and the source data.
    pub fn write(mut self, config: &DatasetConfig, out: &Path) -> Result<BuildOutput, BuildError> {
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        let start = Instant::now();
        let config_hash = config.hash();
        self.model.write_dir(&out.join(INTERNAL_DIR), &config_hash)?;

        let path = out.join(SPLITS_FILE);
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&self.splits).expect("splits serialize"),
        )
        .map_err(io_err(&path))?;
        let path = out.join(PREPROCESSING_FILE);
        std::fs::write(&path, self.manifest.artifacts.to_json()).map_err(io_err(&path))?;
        let path = out.join(DROP_REPORT_FILE);
        std::fs::write(&path, self.drop_report.to_csv()).map_err(io_err(&path))?;
        for (split, seqs) in &self.sequences {
            represent::write_sequences(&represent::sequences_file(out, *split), seqs)?;
        }
        self.manifest.write(out)?;
        self.stage_seconds.push(("write".into(), start.elapsed().as_secs_f64()));
        let counts = self.counts();
        Ok(BuildOutput {
            manifest: self.manifest,
            splits: self.splits,
            drop_report: self.drop_report,
            counts,
            stage_seconds: self.stage_seconds,
        })
    }
}

/// Builds `config` into `out`.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<BuildOutput, BuildError> {
    build(config)?.write(config, out)
}

/// A built dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: SequenceManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, BuildError> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: SequenceManifest::read(dir)?,
        })
    }

    pub fn sequences(&self, split: Split) -> Result<Vec<SubjectSequence>, BuildError> {
        Ok(represent::read_sequences(&represent::sequences_file(&self.dir, split))?)
    }

    pub fn splits(&self) -> Result<SplitAssignment, BuildError> {
        let path = self.dir.join(SPLITS_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| BuildError::Io {
            path,
            message: e.to_string(),
        })
    }
}
