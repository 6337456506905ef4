//! Teacher-forced generative metrics, frozen-backbone fine-tuning and
//! zero-shot evaluation through labelers.

use std::collections::{BTreeMap, HashMap};

use evstream_core::metrics::auroc;
use evstream_core::represent::{collate_windows, recent_window, SequenceManifest, SubjectSequence};
use evstream_core::task::{TaskRow, TaskSpec};
use evstream_core::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{GenerateOptions, GeneratedTrajectory, Generator, StopReason};
use crate::model::{EventStreamModel, HeadKind, LossBreakdown, ModelError};
use crate::tape::sigmoid;
use crate::train::{add_breakdown, CHUNK};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no transitions to evaluate")]
    EmptySplit,
    #[error("training rows contain a single class")]
    DegenerateLabels,
    #[error("every cohort row abstained")]
    AllAbstain,
    #[error("unknown labeler `{0}`")]
    UnknownLabeler(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub name: String,
    pub kind: HeadKind,
    /// Summed NLL divided by the number of transitions.
    pub nll: f64,
    pub n_targets: usize,
    pub accuracy: Option<f64>,
    /// Macro one-vs-rest AUROC over classes seen as targets.
    pub auroc: Option<f64>,
    /// Mean squared error of the predicted mean on observed normalized values.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeReport {
    pub n_sequences: usize,
    pub n_transitions: usize,
    /// Mean NLL per transition.
    pub total_nll: f64,
    /// Mean TTE NLL per positive inter-event time.
    pub tte_nll: f64,
    pub heads: Vec<HeadReport>,
}

#[derive(Default)]
struct HeadAcc {
    n: usize,
    correct: usize,
    sq_err: f64,
    n_values: usize,
    /// `(probability row, target class)` for categorical heads.
    scored: Vec<(Vec<f64>, usize)>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced metrics over every transition of `seqs` (most recent
/// `max_seq_len` events each). Independent of sequence order within chunks
/// and of the thread count.
pub fn eval_generative<T: Scalar>(
    model: &EventStreamModel<T>,
    seqs: &[SubjectSequence],
) -> Result<GenerativeReport, EvalError> {
    let a = &model.arch;
    let windows: Vec<_> = seqs
        .iter()
        .map(|s| recent_window(s.n_events(), model.config.max_seq_len))
        .collect();
    let refs: Vec<&SubjectSequence> = seqs.iter().collect();
    let parts: Vec<Result<(LossBreakdown, Vec<HeadAcc>), ModelError>> = refs
        .par_chunks(CHUNK)
        .zip(windows.par_chunks(CHUNK))
        .map(|(s, w)| {
            let batch = collate_windows(s, w);
            let (queries, loss, em) = model.teacher_forced(&batch)?;
            let mut accs: Vec<HeadAcc> = a.heads.iter().map(|_| HeadAcc::default()).collect();
            for (h, head) in a.heads.iter().enumerate() {
                let acc = &mut accs[h];
                for (qi, q) in queries.iter().enumerate() {
                    let row: Vec<f64> = em.heads[h].row(qi).iter().map(|v| v.as_f64()).collect();
                    let own: Vec<(u32, Option<f64>)> = q.next.iter().copied().filter(|o| head.contains(o.0)).collect();
                    match head.kind {
                        HeadKind::Categorical => {
                            let probs = softmax(&row);
                            let pred = argmax(&row);
                            let targets: Vec<usize> = if own.is_empty() {
                                vec![head.size as usize]
                            } else {
                                own.iter().map(|o| (o.0 - head.offset) as usize).collect()
                            };
                            for t in targets {
                                acc.n += 1;
                                acc.correct += usize::from(pred == t);
                                acc.scored.push((probs.clone(), t));
                            }
                        }
                        HeadKind::Univariate => {
                            acc.n += 1;
                            let value = own.first().and_then(|o| o.1);
                            acc.correct += usize::from((sigmoid(row[0]) >= 0.5) == value.is_some());
                            if let Some(v) = value {
                                acc.sq_err += (row[1] - v).powi(2);
                                acc.n_values += 1;
                            }
                        }
                        HeadKind::MultivariateNumeric => {
                            for (idx, value) in own {
                                let k = 3 * (idx - head.offset) as usize;
                                acc.n += 1;
                                acc.correct += usize::from((sigmoid(row[k]) >= 0.5) == value.is_some());
                                if let Some(v) = value {
                                    acc.sq_err += (row[k + 1] - v).powi(2);
                                    acc.n_values += 1;
                                }
                            }
                        }
                    }
                }
            }
            Ok((loss, accs))
        })
        .collect();

    let mut loss = LossBreakdown {
        total: 0.0,
        tte: 0.0,
        heads: vec![0.0; a.heads.len()],
        n_transitions: 0,
        n_tte_terms: 0,
    };
    let mut accs: Vec<HeadAcc> = a.heads.iter().map(|_| HeadAcc::default()).collect();
    for p in parts {
        let (l, chunk) = p?;
        add_breakdown(&mut loss, &l);
        for (acc, c) in accs.iter_mut().zip(chunk) {
            acc.n += c.n;
            acc.correct += c.correct;
            acc.sq_err += c.sq_err;
            acc.n_values += c.n_values;
            acc.scored.extend(c.scored);
        }
    }
    if loss.n_transitions == 0 {
        return Err(EvalError::EmptySplit);
    }
    let n = loss.n_transitions as f64;
    let heads = a
        .heads
        .iter()
        .zip(&accs)
        .zip(&loss.heads)
        .map(|((head, acc), nll)| HeadReport {
            name: head.name.clone(),
            kind: head.kind,
            nll: nll / n,
            n_targets: acc.n,
            accuracy: (acc.n > 0).then(|| acc.correct as f64 / acc.n as f64),
            auroc: macro_auroc(&acc.scored),
            mse: (acc.n_values > 0).then(|| acc.sq_err / acc.n_values as f64),
        })
        .collect();
    Ok(GenerativeReport {
        n_sequences: seqs.len(),
        n_transitions: loss.n_transitions,
        total_nll: loss.total / n,
        tte_nll: if loss.n_tte_terms > 0 {
            loss.tte / loss.n_tte_terms as f64
        } else {
            0.0
        },
        heads,
    })
}

fn macro_auroc(scored: &[(Vec<f64>, usize)]) -> Option<f64> {
    let mut classes: Vec<usize> = scored.iter().map(|s| s.1).collect();
    classes.sort_unstable();
    classes.dedup();
    let values: Vec<f64> = classes
        .iter()
        .filter_map(|&c| {
            let scores: Vec<f64> = scored.iter().map(|s| s.0[c]).collect();
            let labels: Vec<bool> = scored.iter().map(|s| s.1 == c).collect();
            auroc(&scores, &labels)
        })
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Every event at or before `end_time`, or `None` when there is none.
pub fn prompt_for(seq: &SubjectSequence, end_time: f64) -> Option<SubjectSequence> {
    let n = seq.event_times.partition_point(|t| *t <= end_time);
    (n > 0).then(|| seq.slice(0..n))
}

/// Resolves each task row to its prompt; rows whose subject or prompt is
/// missing are dropped.
pub fn task_prompts(rows: &[TaskRow], seqs: &[SubjectSequence]) -> Vec<(TaskRow, SubjectSequence)> {
    let by_id: HashMap<u64, &SubjectSequence> = seqs.iter().map(|s| (s.subject_id, s)).collect();
    rows.iter()
        .filter_map(|r| {
            let s = by_id.get(&r.subject_id)?;
            prompt_for(s, r.prompt_end_time).map(|p| (*r, p))
        })
        .collect()
}

/// Mean-pooled final hidden states over each prompt's events.
pub fn pooled_features<T: Scalar>(
    model: &EventStreamModel<T>,
    prompts: &[SubjectSequence],
) -> Result<Vec<Vec<f64>>, ModelError> {
    let d = model.arch.d;
    let chunks: Vec<Result<Vec<Vec<f64>>, ModelError>> = prompts
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<&SubjectSequence> = chunk.iter().collect();
            let windows: Vec<_> = chunk
                .iter()
                .map(|s| recent_window(s.n_events(), model.config.max_seq_len))
                .collect();
            let batch = collate_windows(&refs, &windows);
            let h = model.hidden(&batch)?;
            Ok((0..chunk.len())
                .map(|b| {
                    let mut f = vec![0.0; d];
                    for s in 0..batch.lengths[b] {
                        for (x, v) in f.iter_mut().zip(h.row(batch.event_cell(b, s))) {
                            *x += v.as_f64();
                        }
                    }
                    let n = batch.lengths[b].max(1) as f64;
                    f.iter_mut().for_each(|x| *x /= n);
                    f
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(prompts.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// L2-regularized logistic regression on standardized features, fitted by
/// Newton's method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Bias first, then one weight per feature.
    pub weights: Vec<f64>,
}

pub const LOGISTIC_L2: f64 = 1e-2;
const NEWTON_STEPS: usize = 50;

impl LogisticHead {
    pub fn fit(x: &[Vec<f64>], y: &[bool]) -> Result<Self, EvalError> {
        let n_pos = y.iter().filter(|v| **v).count();
        if n_pos == 0 || n_pos == y.len() {
            return Err(EvalError::DegenerateLabels);
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let design: Vec<Vec<f64>> = x
            .iter()
            .map(|r| {
                std::iter::once(1.0)
                    .chain(r.iter().enumerate().map(|(j, v)| (v - mean[j]) / scale[j]))
                    .collect()
            })
            .collect();
        let p = d + 1;
        let mut w = vec![0.0; p];
        for _ in 0..NEWTON_STEPS {
            let mut grad = vec![0.0; p];
            let mut hess = vec![vec![0.0; p]; p];
            for (row, label) in design.iter().zip(y) {
                let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                let pr = sigmoid(z);
                let r = pr - f64::from(u8::from(*label));
                let s = pr * (1.0 - pr);
                for i in 0..p {
                    grad[i] += r * row[i];
                    for j in 0..p {
                        hess[i][j] += s * row[i] * row[j];
                    }
                }
            }
            for i in 1..p {
                grad[i] += LOGISTIC_L2 * w[i];
                hess[i][i] += LOGISTIC_L2;
            }
            hess[0][0] += 1e-9;
            let step = solve(hess, grad);
            let norm: f64 = step.iter().map(|s| s * s).sum::<f64>().sqrt();
            for (wi, si) in w.iter_mut().zip(&step) {
                *wi -= si;
            }
            if norm < 1e-10 {
                break;
            }
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.weights[0]
            + x.iter()
                .enumerate()
                .map(|(j, v)| self.weights[j + 1] * (v - self.mean[j]) / self.scale[j])
                .sum::<f64>();
        sigmoid(z)
    }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .expect("nonempty");
        a.swap(c, piv);
        b.swap(c, piv);
        let d = a[c][c];
        if d.abs() < 1e-300 {
            continue;
        }
        for r in c + 1..n {
            let f = a[r][c] / d;
            if f != 0.0 {
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| a[c][k] * x[k]).sum();
        x[c] = if a[c][c].abs() < 1e-300 {
            0.0
        } else {
            (b[c] - s) / a[c][c]
        };
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub n_train: usize,
    pub n_eval: usize,
    pub auroc: Option<f64>,
    pub accuracy: f64,
    pub head: LogisticHead,
}

/// Fits a logistic head on pooled frozen features of `train` prompts and
/// scores `eval` prompts.
pub fn finetune_head<T: Scalar>(
    model: &EventStreamModel<T>,
    train: &[(TaskRow, SubjectSequence)],
    eval: &[(TaskRow, SubjectSequence)],
) -> Result<FinetuneReport, EvalError> {
    let y: Vec<bool> = train.iter().map(|(r, _)| r.label == 1).collect();
    if y.is_empty() || y.iter().all(|v| *v) || y.iter().all(|v| !*v) {
        return Err(EvalError::DegenerateLabels);
    }
    let xt = pooled_features(model, &train.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?;
    let head = LogisticHead::fit(&xt, &y)?;
    let xe = pooled_features(model, &eval.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?;
    let scores: Vec<f64> = xe.iter().map(|x| head.predict(x)).collect();
    let labels: Vec<bool> = eval.iter().map(|(r, _)| r.label == 1).collect();
    let correct = scores.iter().zip(&labels).filter(|(s, l)| (**s >= 0.5) == **l).count();
    Ok(FinetuneReport {
        n_train: train.len(),
        n_eval: eval.len(),
        auroc: auroc(&scores, &labels),
        accuracy: if eval.is_empty() {
            0.0
        } else {
            correct as f64 / eval.len() as f64
        },
        head,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOutcome {
    Positive,
    Negative,
    Abstain,
}

/// Maps a generated continuation to a task answer. Implementations inspect
/// only generated events.
pub trait Labeler: Sync {
    fn label(&self, trajectory: &GeneratedTrajectory, horizon_minutes: f64) -> LabelOutcome;
}

/// Answer for trajectories that never reached the horizon.
fn unresolved(t: &GeneratedTrajectory) -> LabelOutcome {
    match t.stop_reason {
        StopReason::MaxHorizon => LabelOutcome::Negative,
        StopReason::MaxEvents => LabelOutcome::Abstain,
    }
}

/// Positive when an event carrying `measurement = key` occurs within the
/// horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWithinHorizon {
    pub measurement: String,
    pub key: String,
}

impl Labeler for EventWithinHorizon {
    fn label(&self, t: &GeneratedTrajectory, horizon: f64) -> LabelOutcome {
        let hit = t
            .events
            .iter()
            .take_while(|e| e.time - t.prompt_end_time <= horizon)
            .any(|e| e.has(&self.measurement, &self.key));
        if hit {
            LabelOutcome::Positive
        } else {
            unresolved(t)
        }
    }
}

/// Positive when a raw value of `measurement` (optionally restricted to one
/// key) crosses `threshold` within the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueThreshold {
    pub measurement: String,
    pub key: Option<String>,
    pub threshold: f64,
    pub above: bool,
}

impl Labeler for ValueThreshold {
    fn label(&self, t: &GeneratedTrajectory, horizon: f64) -> LabelOutcome {
        let hit = t
            .events
            .iter()
            .take_while(|e| e.time - t.prompt_end_time <= horizon)
            .filter_map(|e| e.covariates.get(&self.measurement))
            .flatten()
            .filter(|c| self.key.is_none() || c.key == self.key)
            .filter_map(|c| c.raw_value)
            .any(|v| {
                if self.above {
                    v > self.threshold
                } else {
                    v < self.threshold
                }
            });
        if hit {
            LabelOutcome::Positive
        } else {
            unresolved(t)
        }
    }
}

pub struct Constant(pub LabelOutcome);

impl Labeler for Constant {
    fn label(&self, _: &GeneratedTrajectory, _: f64) -> LabelOutcome {
        self.0
    }
}

/// Parses `event:<key>`, `event:<measurement>:<key>`,
/// `value_above:<measurement>[:<key>]:<threshold>`, `value_below:...`,
/// `positive`, `negative`.
pub fn parse_labeler(spec: &str) -> Result<Box<dyn Labeler>, EvalError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let unknown = || EvalError::UnknownLabeler(spec.to_string());
    Ok(match parts.as_slice() {
        ["positive"] => Box::new(Constant(LabelOutcome::Positive)),
        ["negative"] => Box::new(Constant(LabelOutcome::Negative)),
        ["event", key] => Box::new(EventWithinHorizon {
            measurement: evstream_core::config::EVENT_TYPE.into(),
            key: key.to_string(),
        }),
        ["event", m, key] => Box::new(EventWithinHorizon {
            measurement: m.to_string(),
            key: key.to_string(),
        }),
        [dir @ ("value_above" | "value_below"), m, rest @ ..] if !rest.is_empty() && rest.len() <= 2 => {
            let threshold: f64 = rest[rest.len() - 1].parse().map_err(|_| unknown())?;
            Box::new(ValueThreshold {
                measurement: m.to_string(),
                key: (rest.len() == 2).then(|| rest[0].to_string()),
                threshold,
                above: *dir == "value_above",
            })
        }
        _ => return Err(unknown()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub subject_id: u64,
    pub prompt_end_time: f64,
    pub label: u8,
    pub positives: usize,
    pub negatives: usize,
    pub abstains: usize,
    /// `positives / (positives + negatives)`; `None` when every sample abstained.
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub task: String,
    pub n_samples: usize,
    pub seed: u64,
    pub rows: Vec<ZeroShotRow>,
    pub n_abstained_rows: usize,
    pub auroc: Option<f64>,
    pub accuracy: f64,
}

impl ZeroShotReport {
    /// Recomputes metrics from `rows`.
    pub fn from_rows(task: &str, n_samples: usize, seed: u64, rows: Vec<ZeroShotRow>) -> Result<Self, EvalError> {
        let scored: Vec<&ZeroShotRow> = rows.iter().filter(|r| r.probability.is_some()).collect();
        if scored.is_empty() {
            return Err(EvalError::AllAbstain);
        }
        let scores: Vec<f64> = scored.iter().map(|r| r.probability.unwrap()).collect();
        let labels: Vec<bool> = scored.iter().map(|r| r.label == 1).collect();
        let correct = scores.iter().zip(&labels).filter(|(s, l)| (**s >= 0.5) == **l).count();
        Ok(Self {
            task: task.to_string(),
            n_samples,
            seed,
            n_abstained_rows: rows.len() - scored.len(),
            auroc: auroc(&scores, &labels),
            accuracy: correct as f64 / scored.len() as f64,
            rows,
        })
    }
}

/// Rng stream of sample `s` for the row of `subject_id` ending at
/// `prompt_end_time`; independent of the row's position in the task.
pub fn row_stream(subject_id: u64, prompt_end_time: f64, s: usize) -> u64 {
    let mut z = subject_id
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(prompt_end_time.to_bits().rotate_left(29))
        .wrapping_add((s as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-row sample fractions from `n_samples` continuations of each prompt.
pub fn zero_shot<T: Scalar>(
    model: &EventStreamModel<T>,
    manifest: &SequenceManifest,
    task: &TaskSpec,
    prompts: &[(TaskRow, SubjectSequence)],
    labeler: &dyn Labeler,
    n_samples: usize,
    seed: u64,
    max_events: usize,
) -> Result<ZeroShotReport, EvalError> {
    let generator = Generator::new(
        model,
        manifest,
        GenerateOptions {
            max_events,
            max_horizon_minutes: task.horizon_minutes,
            temperature: 1.0,
        },
    );
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..n_samples).map(move |s| (i, s)))
        .collect();
    let outcomes: Vec<Result<LabelOutcome, ModelError>> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let row = &prompts[i].0;
            let t = generator.trajectory(&prompts[i].1, seed, row_stream(row.subject_id, row.prompt_end_time, s))?;
            Ok(labeler.label(&t, task.horizon_minutes))
        })
        .collect();
    let mut counts: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    for (&(i, _), o) in jobs.iter().zip(outcomes) {
        let c = counts.entry(i).or_insert([0; 3]);
        match o? {
            LabelOutcome::Positive => c[0] += 1,
            LabelOutcome::Negative => c[1] += 1,
            LabelOutcome::Abstain => c[2] += 1,
        }
    }
    let rows = prompts
        .iter()
        .enumerate()
        .map(|(i, (r, _))| {
            let [p, n, ab] = counts.get(&i).copied().unwrap_or([0; 3]);
            ZeroShotRow {
                subject_id: r.subject_id,
                prompt_end_time: r.prompt_end_time,
                label: r.label,
                positives: p,
                negatives: n,
                abstains: ab,
                probability: (p + n > 0).then(|| p as f64 / (p + n) as f64),
            }
        })
        .collect();
    ZeroShotReport::from_rows(&task.name, n_samples, seed, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_separates_a_clean_feature() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let h = LogisticHead::fit(&x, &y).unwrap();
        let scores: Vec<f64> = x.iter().map(|r| h.predict(r)).collect();
        assert_eq!(auroc(&scores, &y), Some(1.0));
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            LogisticHead::fit(&x, &[true, true]),
            Err(EvalError::DegenerateLabels)
        ));
    }

    #[test]
    fn labeler_grammar() {
        assert!(parse_labeler("event:X").is_ok());
        assert!(parse_labeler("event:lab:K1").is_ok());
        assert!(parse_labeler("value_above:lab_value:2.5").is_ok());
        assert!(parse_labeler("value_below:lab:K1:0").is_ok());
        assert!(matches!(parse_labeler("bogus"), Err(EvalError::UnknownLabeler(_))));
    }

    #[test]
    fn all_abstaining_rows_are_an_error() {
        let row = ZeroShotRow {
            subject_id: 1,
            prompt_end_time: 0.0,
            label: 1,
            positives: 0,
            negatives: 0,
            abstains: 3,
            probability: None,
        };
        assert!(matches!(
            ZeroShotReport::from_rows("t", 3, 0, vec![row]),
            Err(EvalError::AllAbstain)
        ));
    }
}
