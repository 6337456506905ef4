use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const BUILD_STATS_FILE: &str = "build_stats.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Provenance of one command run: what it read, what it wrote, with which
/// seeds, and how long it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: Option<String>,
    /// Manifest hash of the dataset the inputs were built from.
    pub dataset_hash: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub wall_seconds: f64,
    pub stage_seconds: Vec<(String, f64)>,
    pub peak_memory_bytes: Option<u64>,
    pub counts: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: None,
            dataset_hash: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed: None,
            threads: rayon::current_num_threads(),
            wall_seconds: 0.0,
            stage_seconds: Vec::new(),
            peak_memory_bytes: peak_memory_bytes(),
            counts: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

/// Peak resident set size of this process, where the platform reports it.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Every regular file under `dir` with its size, sorted by relative path.
pub fn file_sizes(dir: &Path) -> anyhow::Result<Vec<(String, u64)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap_or(&path).display().to_string();
                out.push((rel, std::fs::metadata(&path)?.len()));
            }
        }
    }
    out.sort();
    Ok(out)
}
