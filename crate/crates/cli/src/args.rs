use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Parser)]
#[command(name = "evstream", version, about = "Event-stream datasets and generative models")]
pub struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the machine-readable report to stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset with known ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract, pre-process and serialize a dataset.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a model on the train split.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Save an intermediate checkpoint every this many steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long, value_enum, default_value_t = LogFormat::Csv)]
        log_format: LogFormat,
    },
    /// Sample continuations of every prompt in a split as JSON lines.
    Generate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "tune")]
        prompt_split: String,
        #[arg(long, default_value_t = 1)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        max_events: usize,
        #[arg(long)]
        horizon_minutes: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Use only the first this many prompts.
        #[arg(long)]
        max_prompts: Option<usize>,
    },
    /// Teacher-forced generative metrics on a split.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "tune")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot task predictions from labeled generated continuations.
    EvaluateZeroshot {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task header JSON.
        #[arg(long)]
        task: PathBuf,
        /// `event:<key>`, `event:<measurement>:<key>`,
        /// `value_above:<measurement>[:<key>]:<threshold>`, `value_below:...`,
        /// `positive` or `negative`.
        #[arg(long)]
        labeler: String,
        #[arg(long, default_value_t = 16)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        max_events: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a logistic head on frozen pooled representations.
    Finetune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "train")]
        train_split: String,
        #[arg(long, default_value = "held_out")]
        eval_split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a dataset and optionally a checkpoint.
    Inspect {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Throughput and storage report for a dataset.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        /// Also time an in-memory rebuild from this dataset config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}
