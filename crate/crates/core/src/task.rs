//! Labeled prediction tasks: a JSON header naming a cohort CSV with
//! `subject_id,prompt_end_time,label` rows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub subject_id: u64,
    /// Minutes since the epoch; the prompt is every event at or before it.
    pub prompt_end_time: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeader {
    pub name: String,
    pub horizon_minutes: f64,
    /// Relative to the header's directory.
    pub cohort_csv: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub horizon_minutes: f64,
    pub rows: Vec<TaskRow>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl ToString) -> TaskError {
    TaskError::Format {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

impl TaskSpec {
    /// Writes `<name>.json` and `<name>.csv` into `dir`; returns the header path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, TaskError> {
        let csv_name = format!("{}.csv", self.name);
        let csv_path = dir.join(&csv_name);
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| format_err(&csv_path, e))?;
        w.write_record(["subject_id", "prompt_end_time", "label"])
            .map_err(|e| format_err(&csv_path, e))?;
        for r in &self.rows {
            w.write_record([
                r.subject_id.to_string(),
                r.prompt_end_time.to_string(),
                r.label.to_string(),
            ])
            .map_err(|e| format_err(&csv_path, e))?;
        }
        w.flush().map_err(io(&csv_path))?;
        let header = TaskHeader {
            name: self.name.clone(),
            horizon_minutes: self.horizon_minutes,
            cohort_csv: csv_name.into(),
        };
        let path = dir.join(format!("{}.json", self.name));
        std::fs::write(&path, serde_json::to_string_pretty(&header).expect("header serializes")).map_err(io(&path))?;
        Ok(path)
    }

    pub fn read(header_path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(header_path).map_err(io(header_path))?;
        let header: TaskHeader = serde_json::from_str(&text).map_err(|e| format_err(header_path, e))?;
        let csv_path = header_path.parent().unwrap_or(Path::new(".")).join(&header.cohort_csv);
        let mut r = csv::Reader::from_path(&csv_path).map_err(|e| format_err(&csv_path, e))?;
        let mut rows = Vec::new();
        for (i, rec) in r.deserialize::<TaskRow>().enumerate() {
            let row = rec.map_err(|e| format_err(&csv_path, format!("row {}: {e}", i + 1)))?;
            if row.label > 1 {
                return Err(format_err(&csv_path, format!("row {}: label must be 0 or 1", i + 1)));
            }
            rows.push(row);
        }
        Ok(Self {
            name: header.name,
            horizon_minutes: header.horizon_minutes,
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = TaskSpec {
            name: "t".into(),
            horizon_minutes: 100.0,
            rows: vec![
                TaskRow {
                    subject_id: 3,
                    prompt_end_time: 12.5,
                    label: 1,
                },
                TaskRow {
                    subject_id: 4,
                    prompt_end_time: 0.0,
                    label: 0,
                },
            ],
        };
        let p = t.write(dir.path()).unwrap();
        assert_eq!(TaskSpec::read(&p).unwrap(), t);
    }

    #[test]
    fn rejects_non_binary_label() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.csv"), "subject_id,prompt_end_time,label\n1,0,2\n").unwrap();
        std::fs::write(
            dir.path().join("h.json"),
            r#"{"name":"x","horizon_minutes":1,"cohort_csv":"c.csv"}"#,
        )
        .unwrap();
        assert!(matches!(
            TaskSpec::read(&dir.path().join("h.json")),
            Err(TaskError::Format { .. })
        ));
    }
}
