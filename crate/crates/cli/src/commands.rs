use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use evstream_core::build::{self, build_dataset, Dataset};
use evstream_core::config::{load_dataset_config, parse_model_config, ModelConfig};
use evstream_core::preprocess::Split;
use evstream_core::represent::{SequenceManifest, SubjectSequence};
use evstream_core::synth::{Oracle, OracleSpec};
use evstream_core::task::TaskSpec;
use evstream_model::checkpoint::{self, CheckpointHeader};
use evstream_model::evaluate::{self, eval_generative, finetune_head, parse_labeler, task_prompts};
use evstream_model::generate::{GenerateOptions, Generator};
use evstream_model::tensor::Tensor;
use evstream_model::train::{TrainOptions, Trainer};
use evstream_model::{Model, ModelError};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{Cli, Command, LogFormat};
use crate::manifest::{file_sizes, RunManifest, BUILD_STATS_FILE, RUN_MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Result of a command: a one-line human summary and a JSON report.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: String,
    pub report: Value,
}

fn outcome(summary: String, report: impl Serialize) -> anyhow::Result<Outcome> {
    Ok(Outcome {
        summary,
        report: serde_json::to_value(report)?,
    })
}

/// Runs `cli` inside a worker pool sized by `--threads`.
pub fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        pool = pool.num_threads(n);
    }
    pool.build()?.install(|| dispatch(&cli.command))
}

fn dispatch(command: &Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Synth { spec, out } => synth(spec, out),
        Command::Build { config, out } => build_cmd(config, out),
        Command::Pretrain {
            dataset,
            model_config,
            out,
            steps,
            seed,
            batch_size,
            checkpoint_every,
            log_format,
        } => pretrain(&PretrainArgs {
            dataset,
            model_config,
            out,
            steps: *steps,
            seed: *seed,
            batch_size: *batch_size,
            checkpoint_every: *checkpoint_every,
            log_format: *log_format,
        }),
        Command::Generate {
            dataset,
            checkpoint,
            out,
            prompt_split,
            n_samples,
            seed,
            max_events,
            horizon_minutes,
            temperature,
            max_prompts,
        } => generate(&GenerateArgs {
            dataset,
            checkpoint,
            out,
            prompt_split,
            n_samples: *n_samples,
            seed: *seed,
            options: GenerateOptions {
                max_events: *max_events,
                max_horizon_minutes: horizon_minutes.unwrap_or(f64::INFINITY),
                temperature: *temperature,
            },
            max_prompts: *max_prompts,
        }),
        Command::Evaluate {
            dataset,
            checkpoint,
            split,
            out,
        } => evaluate_cmd(dataset, checkpoint, split, out.as_deref()),
        Command::EvaluateZeroshot {
            dataset,
            checkpoint,
            task,
            labeler,
            n_samples,
            seed,
            max_events,
            out,
        } => zeroshot(&ZeroShotArgs {
            dataset,
            checkpoint,
            task,
            labeler,
            n_samples: *n_samples,
            seed: *seed,
            max_events: *max_events,
            out: out.as_deref(),
        }),
        Command::Finetune {
            dataset,
            checkpoint,
            task,
            train_split,
            eval_split,
            out,
        } => finetune(dataset, checkpoint, task, train_split, eval_split, out.as_deref()),
        Command::Inspect { dataset, checkpoint } => inspect(dataset, checkpoint.as_deref()),
        Command::Bench { dataset, config } => bench(dataset, config.as_deref()),
    }
}

fn split_arg(name: &str) -> anyhow::Result<Split> {
    Split::parse(name).ok_or_else(|| anyhow!("unknown split `{name}`; expected train, tune or held_out"))
}

fn open_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("opening dataset {}", dir.display()))
}

fn load_model(dataset: &Dataset, path: &Path) -> anyhow::Result<(Model, CheckpointHeader)> {
    checkpoint::load(path, &dataset.manifest).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_report(path: Option<&Path>, report: &impl Serialize) -> anyhow::Result<()> {
    if let Some(path) = path {
        std::fs::write(path, serde_json::to_string_pretty(report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn synth(spec: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let oracle = Oracle::new(OracleSpec::from_yaml(&text)?)?;
    let sidecar = oracle.write(out)?;
    info!("wrote {} subjects to {}", sidecar.n_subjects, out.display());
    outcome(
        format!(
            "synthesized {} subjects, {} events into {}",
            sidecar.n_subjects,
            sidecar.n_events,
            out.display()
        ),
        json!({
            "out": out,
            "n_subjects": sidecar.n_subjects,
            "n_events": sidecar.n_events,
            "n_observations": sidecar.n_observations,
            "measurement_counts": sidecar.measurement_counts,
            "task": sidecar.task.as_ref().map(|t| json!({
                "name": t.name,
                "n_rows": t.rows.len(),
                "bayes_auroc": t.bayes_auroc,
            })),
        }),
    )
}

fn build_cmd(config_path: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let config = load_dataset_config(config_path)?;
    let result = build_dataset(&config, out)?;
    let mut run = RunManifest::new("build");
    run.config_hash = Some(config.hash());
    run.dataset_hash = Some(result.manifest.hash());
    run.inputs.insert("config".into(), config_path.display().to_string());
    for s in &config.sources {
        run.inputs
            .insert(format!("source:{}", s.name), s.path.display().to_string());
    }
    run.outputs = file_sizes(out)?.into_iter().map(|(p, _)| p).collect();
    run.seed = Some(config.seed);
    run.stage_seconds = result.stage_seconds.clone();
    run.counts = BTreeMap::from([
        ("subjects".into(), result.counts.n_subjects as u64),
        ("events".into(), result.counts.n_events as u64),
        ("measurements".into(), result.counts.n_measurements as u64),
        ("observations".into(), result.counts.n_observations as u64),
    ]);
    let bytes: u64 = file_sizes(out)?.iter().map(|(_, b)| b).sum();
    run.counts.insert("output_bytes".into(), bytes);
    run.wall_seconds = start.elapsed().as_secs_f64();
    run.peak_memory_bytes = crate::manifest::peak_memory_bytes();
    run.write(&out.join(BUILD_STATS_FILE))?;
    info!("built {} in {:.2}s", out.display(), run.wall_seconds);
    outcome(
        format!(
            "built {} subjects, {} events, {} measurements into {} in {:.2}s",
            result.counts.n_subjects,
            result.counts.n_events,
            result.counts.n_measurements,
            out.display(),
            run.wall_seconds
        ),
        run,
    )
}

struct PretrainArgs<'a> {
    dataset: &'a Path,
    model_config: &'a Path,
    out: &'a Path,
    steps: u64,
    seed: u64,
    batch_size: usize,
    checkpoint_every: Option<u64>,
    log_format: LogFormat,
}

/// Model config read from `path` with vocabulary sizes filled in from the
/// dataset layout.
pub fn read_model_config(path: &Path, manifest: &SequenceManifest) -> anyhow::Result<ModelConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = parse_model_config(&text)?;
    config.measurement_vocab_sizes = manifest
        .layout
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.size as usize))
        .collect();
    Ok(config)
}

fn pretrain(a: &PretrainArgs) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let dataset = open_dataset(a.dataset)?;
    let config = read_model_config(a.model_config, &dataset.manifest)?;
    let train = dataset.sequences(Split::Train)?;
    let hash = dataset.manifest.hash();
    std::fs::create_dir_all(a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let model = Model::new(&dataset.manifest.layout, &config, a.seed)?;
    let n_parameters = model.arch.n_parameters();
    let mut trainer = Trainer::new(
        model,
        TrainOptions {
            batch_size: a.batch_size,
            seed: a.seed,
        },
    );
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(match a.log_format {
        LogFormat::Csv => "loss.csv",
        LogFormat::Jsonl => "loss.jsonl",
    });
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    if a.log_format == LogFormat::Csv {
        writeln!(log, "step,loss,n_transitions")?;
    }

    let mut losses = Vec::with_capacity(a.steps as usize);
    let mut last_good: (u64, Vec<Tensor<f64>>) = (0, trainer.model.params.clone());
    for _ in 0..a.steps {
        let before = trainer.model.params.clone();
        match trainer.train_step(&train) {
            Ok(entry) => {
                last_good = (entry.step - 1, before);
                match a.log_format {
                    LogFormat::Csv => writeln!(log, "{},{},{}", entry.step, entry.loss, entry.n_transitions)?,
                    LogFormat::Jsonl => writeln!(log, "{}", serde_json::to_string(&entry)?)?,
                }
                losses.push(entry.loss);
                if a.checkpoint_every.is_some_and(|k| k > 0 && entry.step % k == 0) {
                    checkpoint::save(&ckpt, &trainer.model, &hash, entry.step, a.seed)?;
                }
            }
            Err(e @ (ModelError::NonFinite(_) | ModelError::NonFiniteGradient(_))) => {
                log.flush()?;
                trainer.model.params = last_good.1;
                checkpoint::save(&ckpt, &trainer.model, &hash, last_good.0, a.seed)?;
                warn!(
                    "saved last good parameters (step {}) to {}",
                    last_good.0,
                    ckpt.display()
                );
                return Err(anyhow::Error::new(e).context(format!(
                    "training diverged at step {}; last good checkpoint written to {}",
                    trainer.step + 1,
                    ckpt.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
    }
    log.flush()?;
    checkpoint::save(&ckpt, &trainer.model, &hash, trainer.step, a.seed)?;

    let mut run = RunManifest::new("pretrain");
    run.dataset_hash = Some(hash);
    run.inputs.insert("dataset".into(), a.dataset.display().to_string());
    run.inputs
        .insert("model_config".into(), a.model_config.display().to_string());
    run.outputs = vec![
        CHECKPOINT_FILE.into(),
        log_path.file_name().unwrap().to_string_lossy().into(),
    ];
    run.seed = Some(a.seed);
    run.wall_seconds = start.elapsed().as_secs_f64();
    run.counts = BTreeMap::from([
        ("steps".into(), a.steps),
        ("parameters".into(), n_parameters as u64),
        ("train_sequences".into(), train.len() as u64),
    ]);
    run.write(&a.out.join(RUN_MANIFEST_FILE))?;
    let report = json!({
        "checkpoint": ckpt,
        "steps": a.steps,
        "n_parameters": n_parameters,
        "initial_loss": losses.first(),
        "final_loss": losses.last(),
        "wall_seconds": run.wall_seconds,
    });
    outcome(
        format!(
            "trained {} steps ({} parameters); loss {} -> {}",
            a.steps,
            n_parameters,
            losses.first().map_or("n/a".into(), |l| format!("{l:.4}")),
            losses.last().map_or("n/a".into(), |l| format!("{l:.4}")),
        ),
        report,
    )
}

struct GenerateArgs<'a> {
    dataset: &'a Path,
    checkpoint: &'a Path,
    out: &'a Path,
    prompt_split: &'a str,
    n_samples: usize,
    seed: u64,
    options: GenerateOptions,
    max_prompts: Option<usize>,
}

fn generate(a: &GenerateArgs) -> anyhow::Result<Outcome> {
    let dataset = open_dataset(a.dataset)?;
    let (model, _) = load_model(&dataset, a.checkpoint)?;
    let mut prompts: Vec<SubjectSequence> = dataset
        .sequences(split_arg(a.prompt_split)?)?
        .into_iter()
        .filter(|s| s.n_events() > 0)
        .collect();
    if let Some(n) = a.max_prompts {
        prompts.truncate(n);
    }
    let generator = Generator::new(&model, &dataset.manifest, a.options);
    let n = a.n_samples;
    let trajectories = (0..prompts.len() * n)
        .into_par_iter()
        .map(|j| generator.trajectory(&prompts[j / n], a.seed, j as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = BufWriter::new(File::create(a.out).with_context(|| format!("creating {}", a.out.display()))?);
    for t in &trajectories {
        writeln!(w, "{}", serde_json::to_string(t)?)?;
    }
    w.flush()?;
    let n_events: usize = trajectories.iter().map(|t| t.events.len()).sum();
    outcome(
        format!(
            "wrote {} trajectories ({} events) to {}",
            trajectories.len(),
            n_events,
            a.out.display()
        ),
        json!({
            "out": a.out,
            "n_prompts": prompts.len(),
            "n_trajectories": trajectories.len(),
            "n_events": n_events,
            "seed": a.seed,
        }),
    )
}

fn evaluate_cmd(dataset: &Path, ckpt: &Path, split: &str, out: Option<&Path>) -> anyhow::Result<Outcome> {
    let dataset = open_dataset(dataset)?;
    let (model, _) = load_model(&dataset, ckpt)?;
    let seqs = dataset.sequences(split_arg(split)?)?;
    let report = eval_generative(&model, &seqs)?;
    write_report(out, &report)?;
    outcome(
        format!(
            "{split}: {} transitions, NLL {:.4} (TTE {:.4})",
            report.n_transitions, report.total_nll, report.tte_nll
        ),
        report,
    )
}

/// Every sequence of every split.
fn all_sequences(dataset: &Dataset) -> anyhow::Result<Vec<SubjectSequence>> {
    let mut out = Vec::new();
    for split in Split::ALL {
        out.extend(dataset.sequences(split)?);
    }
    Ok(out)
}

struct ZeroShotArgs<'a> {
    dataset: &'a Path,
    checkpoint: &'a Path,
    task: &'a Path,
    labeler: &'a str,
    n_samples: usize,
    seed: u64,
    max_events: usize,
    out: Option<&'a Path>,
}

fn zeroshot(a: &ZeroShotArgs) -> anyhow::Result<Outcome> {
    if a.n_samples == 0 {
        bail!("--n-samples must be positive");
    }
    let dataset = open_dataset(a.dataset)?;
    let (model, _) = load_model(&dataset, a.checkpoint)?;
    let task = TaskSpec::read(a.task)?;
    if !(task.horizon_minutes > 0.0) {
        bail!("task horizon must be positive");
    }
    let labeler = parse_labeler(a.labeler)?;
    let seqs = all_sequences(&dataset)?;
    let prompts = task_prompts(&task.rows, &seqs);
    if prompts.len() < task.rows.len() {
        warn!("{} task rows have no prompt events", task.rows.len() - prompts.len());
    }
    let report = evaluate::zero_shot(
        &model,
        &dataset.manifest,
        &task,
        &prompts,
        labeler.as_ref(),
        a.n_samples,
        a.seed,
        a.max_events,
    )?;
    write_report(a.out, &report)?;
    outcome(
        format!(
            "{}: {} rows ({} abstained), AUROC {}, accuracy {:.3}",
            report.task,
            report.rows.len(),
            report.n_abstained_rows,
            report.auroc.map_or("n/a".into(), |v| format!("{v:.4}")),
            report.accuracy
        ),
        report,
    )
}

fn finetune(
    dataset: &Path,
    ckpt: &Path,
    task: &Path,
    train_split: &str,
    eval_split: &str,
    out: Option<&Path>,
) -> anyhow::Result<Outcome> {
    let dataset = open_dataset(dataset)?;
    let (model, _) = load_model(&dataset, ckpt)?;
    let task = TaskSpec::read(task)?;
    let ids = |split: Split| -> anyhow::Result<(HashSet<u64>, Vec<SubjectSequence>)> {
        let seqs = dataset.sequences(split)?;
        Ok((seqs.iter().map(|s| s.subject_id).collect(), seqs))
    };
    let (train_ids, train_seqs) = ids(split_arg(train_split)?)?;
    let (eval_ids, eval_seqs) = ids(split_arg(eval_split)?)?;
    let rows = |set: &HashSet<u64>| {
        task.rows
            .iter()
            .copied()
            .filter(|r| set.contains(&r.subject_id))
            .collect::<Vec<_>>()
    };
    let train = task_prompts(&rows(&train_ids), &train_seqs);
    let eval = task_prompts(&rows(&eval_ids), &eval_seqs);
    let report = finetune_head(&model, &train, &eval)?;
    write_report(out, &report)?;
    outcome(
        format!(
            "{}: {} train / {} eval rows, AUROC {}, accuracy {:.3}",
            task.name,
            report.n_train,
            report.n_eval,
            report.auroc.map_or("n/a".into(), |v| format!("{v:.4}")),
            report.accuracy
        ),
        report,
    )
}

fn inspect(dataset: &Path, ckpt: Option<&Path>) -> anyhow::Result<Outcome> {
    let dataset = open_dataset(dataset)?;
    let m = &dataset.manifest;
    let mut report = json!({
        "dataset_hash": m.hash(),
        "vocab_size": m.layout.vocab_size,
        "measurements": m.layout.entries.iter().map(|e| json!({
            "name": e.name,
            "temporality": e.temporality,
            "kind": e.kind,
            "offset": e.offset,
            "size": e.size,
        })).collect::<Vec<_>>(),
        "splits": m.splits,
        "empty_subjects": m.empty_subjects.len(),
    });
    let mut summary = format!(
        "dataset {}: vocabulary {}, {} measurements",
        &m.hash()[..12],
        m.layout.vocab_size,
        m.layout.entries.len()
    );
    if let Some(path) = ckpt {
        let (model, header) = load_model(&dataset, path)?;
        summary.push_str(&format!(
            "; checkpoint at step {} with {} parameters",
            header.step,
            model.arch.n_parameters()
        ));
        report["checkpoint"] = json!({
            "step": header.step,
            "seed": header.seed,
            "n_parameters": model.arch.n_parameters(),
            "model_config": header.model_config,
        });
    }
    outcome(summary, report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n_subjects: usize,
    pub n_events: usize,
    pub n_observations: usize,
    pub vocab_size: u32,
    pub bytes_on_disk: u64,
    pub files: Vec<(String, u64)>,
    pub load_seconds: f64,
    pub events_per_second: f64,
    /// Bytes of the sparse per-observation payload (index, value, mask) plus
    /// per-event times and offsets.
    pub sparse_bytes: u64,
    /// Bytes of a dense `events × vocabulary` f32 multi-hot export.
    pub dense_bytes: u64,
    pub dense_to_sparse: Option<f64>,
    pub build: Option<BuildBench>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildBench {
    pub rows: usize,
    pub seconds: f64,
    pub rows_per_second: f64,
    pub stage_seconds: Vec<(String, f64)>,
}

fn rate(n: usize, seconds: f64) -> f64 {
    if n == 0 || seconds <= 0.0 {
        0.0
    } else {
        n as f64 / seconds
    }
}

fn bench(dir: &Path, config: Option<&Path>) -> anyhow::Result<Outcome> {
    let dataset = open_dataset(dir)?;
    let files = file_sizes(dir)?;
    let start = Instant::now();
    let seqs = all_sequences(&dataset)?;
    let load_seconds = start.elapsed().as_secs_f64();
    let n_events: usize = seqs.iter().map(|s| s.n_events()).sum();
    let n_observations: usize = seqs.iter().map(|s| s.n_observations()).sum();
    let vocab = dataset.manifest.layout.vocab_size;
    let build = match config {
        Some(path) => {
            let config = load_dataset_config(path)?;
            let start = Instant::now();
            let built = build::build(&config)?;
            let seconds = start.elapsed().as_secs_f64();
            let c = built.counts();
            let rows = c.n_events + c.n_measurements;
            Some(BuildBench {
                rows,
                seconds,
                rows_per_second: rate(rows, seconds),
                stage_seconds: built.stage_seconds,
            })
        }
        None => None,
    };
    let sparse_bytes = (n_observations * (4 + 8 + 1) + n_events * (8 + 8)) as u64;
    let dense_bytes = (n_events as u64) * vocab as u64 * 4;
    let report = BenchReport {
        n_subjects: seqs.len(),
        n_events,
        n_observations,
        vocab_size: vocab,
        bytes_on_disk: files.iter().map(|(_, b)| b).sum(),
        files,
        load_seconds,
        events_per_second: rate(n_events, load_seconds),
        sparse_bytes,
        dense_bytes,
        dense_to_sparse: (sparse_bytes > 0).then(|| dense_bytes as f64 / sparse_bytes as f64),
        build,
    };
    outcome(
        format!(
            "{} events, {} observations; {} bytes on disk; dense/sparse {}",
            report.n_events,
            report.n_observations,
            report.bytes_on_disk,
            report.dense_to_sparse.map_or("n/a".into(), |r| format!("{r:.1}x"))
        ),
        report,
    )
}
