//! Correctness harnesses: finite-difference gradient checks, causality
//! probes, tied-weight mode comparison and random sequence fixtures.

use std::collections::BTreeSet;

use evstream_core::config::{Temporality, ValueKind};
use evstream_core::represent::{collate_windows, recent_window, FeatureLayout, SparseBatch, SubjectSequence};
use evstream_core::Scalar;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{next_obs, EmissionParams, EventStreamModel, ModelError, Query};
use crate::tensor::Tensor;

/// Denominator floor of the relative gradient error, so that entries whose
/// true gradient is ~0 are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
/// Emission difference above which a probe counts as a violation.
pub const PROBE_TOLERANCE: f64 = 1e-12;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Adds `N(0, std)` noise to every parameter, so that zero-initialized heads
/// carry signal.
pub fn randomize<T: Scalar, R: Rng>(model: &mut EventStreamModel<T>, std: f64, rng: &mut R) {
    let n = Normal::new(0.0, std).expect("positive std");
    for p in &mut model.params {
        for x in &mut p.data {
            *x += T::of(n.sample(rng));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub param: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Mean loss per transition.
pub fn mean_loss(model: &EventStreamModel<f64>, batch: &SparseBatch) -> Result<f64, ModelError> {
    let l = model.evaluate_loss(batch)?;
    Ok(l.total / l.n_transitions.max(1) as f64)
}

/// Compares analytic gradients of the mean loss with central differences at
/// `n` random entries. Tensors are drawn uniformly; embedding rows are drawn
/// among those the batch touches.
pub fn gradient_check<R: Rng>(
    model: &EventStreamModel<f64>,
    batch: &SparseBatch,
    n: usize,
    eps: f64,
    rng: &mut R,
) -> Result<Vec<GradCheck>, ModelError> {
    let (l, grads) = model.loss_and_grad(batch)?;
    let scale = 1.0 / l.n_transitions.max(1) as f64;
    let mut used: BTreeSet<u32> = batch.obs_indices.iter().copied().filter(|i| *i != 0).collect();
    used.extend(batch.static_indices.iter().flatten());
    let used: Vec<u32> = used.into_iter().collect();
    let mut out = Vec::with_capacity(n);
    let mut probe = model.clone();
    for _ in 0..n {
        let t = rng.gen_range(0..model.params.len());
        let spec = &model.arch.params[t];
        let entry = if spec.name.ends_with("embedding") && !used.is_empty() {
            let row = *used.choose(rng).expect("nonempty") as usize;
            row * spec.cols + rng.gen_range(0..spec.cols)
        } else {
            rng.gen_range(0..spec.rows * spec.cols)
        };
        let orig = probe.params[t].data[entry];
        probe.params[t].data[entry] = orig + eps;
        let up = mean_loss(&probe, batch)?;
        probe.params[t].data[entry] = orig - eps;
        let down = mean_loss(&probe, batch)?;
        probe.params[t].data[entry] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[t].data[entry] * scale;
        out.push(GradCheck {
            param: spec.name.clone(),
            entry,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return f64::INFINITY;
    }
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Largest difference between two emission sets, restricted to the TTE
/// output and the heads selected by `heads`.
pub fn emission_diff<T: Scalar>(a: &EmissionParams<T>, b: &EmissionParams<T>, heads: impl Fn(usize) -> bool) -> f64 {
    let mut d = max_abs_diff(&a.tte, &b.tte);
    for (h, (x, y)) in a.heads.iter().zip(&b.heads).enumerate() {
        if heads(h) {
            d = d.max(max_abs_diff(x, y));
        }
    }
    d
}

/// A random valid sequence over `layout`: every event has an event type,
/// functional features and a random subset of dynamic measurements.
pub fn random_sequence<R: Rng>(
    layout: &FeatureLayout,
    subject_id: u64,
    n_events: usize,
    rng: &mut R,
) -> SubjectSequence {
    let statics = layout
        .entries
        .iter()
        .filter(|e| e.temporality == Temporality::Static)
        .map(|e| e.offset + rng.gen_range(0..e.size))
        .collect();
    let mut seq = SubjectSequence::empty(subject_id, Some(0.0), statics);
    let mut t = 1000.0 * rng.gen::<f64>();
    for _ in 0..n_events {
        t += (rng.gen::<f64>() * 8.0).exp();
        let mut obs = Vec::new();
        for e in &layout.entries {
            let value = |rng: &mut R| Some(Normal::new(0.0, 1.0).expect("unit").sample(rng));
            match (e.temporality, e.kind) {
                (Temporality::Static, _) => {}
                (Temporality::FunctionalTimeDependent, ValueKind::UnivariateRegression) => {
                    obs.push((e.offset, value(rng)))
                }
                (Temporality::FunctionalTimeDependent, _) => obs.push((e.offset + rng.gen_range(0..e.size), None)),
                (Temporality::Dynamic, _) if e.offset == 1 => obs.push((e.offset + rng.gen_range(0..e.size), None)),
                (Temporality::Dynamic, kind) => {
                    if rng.gen_bool(0.4) {
                        continue;
                    }
                    match kind {
                        ValueKind::UnivariateRegression => obs.push((e.offset, value(rng))),
                        ValueKind::Categorical => {
                            for _ in 0..rng.gen_range(1..=2) {
                                obs.push((e.offset + rng.gen_range(0..e.size), None));
                            }
                        }
                        ValueKind::MultivariateRegression => {
                            for _ in 0..rng.gen_range(1..=2) {
                                let v = if rng.gen_bool(0.8) { value(rng) } else { None };
                                obs.push((e.offset + rng.gen_range(0..e.size), v));
                            }
                        }
                    }
                }
            }
        }
        seq.push_event(t, obs);
    }
    seq
}

/// Result of one perturbation probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub description: String,
    pub max_diff: f64,
}

impl Probe {
    pub fn violated(&self) -> bool {
        !(self.max_diff <= PROBE_TOLERANCE)
    }
}

fn emissions_for<T: Scalar>(
    model: &EventStreamModel<T>,
    seqs: &[SubjectSequence],
    queries: &[Query],
) -> Result<EmissionParams<T>, ModelError> {
    let refs: Vec<&SubjectSequence> = seqs.iter().collect();
    let windows: Vec<_> = seqs.iter().map(|s| 0..s.n_events()).collect();
    model.emissions(&collate_windows(&refs, &windows), queries)
}

/// Replaces event `p` of `seq` by a perturbed copy: its time, one index, one
/// value, or its observation count changes.
fn perturb_event<R: Rng>(
    layout: &FeatureLayout,
    seq: &SubjectSequence,
    p: usize,
    rng: &mut R,
) -> (SubjectSequence, String) {
    let mut events: Vec<(f64, Vec<(u32, Option<f64>)>)> = (0..seq.n_events())
        .map(|i| {
            let r = seq.event_range(i);
            (
                seq.event_times[i],
                r.map(|k| (seq.obs_indices[k], seq.obs_value_mask[k].then_some(seq.obs_values[k])))
                    .collect(),
            )
        })
        .collect();
    let kind = rng.gen_range(0..4);
    let desc;
    let (time, obs) = &mut events[p];
    match kind {
        0 => {
            let prev = seq.event_times[p - 1];
            let next = seq.event_times.get(p + 1).copied().unwrap_or(*time + 1e4);
            *time = prev + (next - prev) * rng.gen_range(0.05..0.95);
            desc = format!("time of event {p}");
        }
        1 if !obs.is_empty() => {
            let k = rng.gen_range(0..obs.len());
            let (pos, _) = layout.owner(obs[k].0).expect("valid index");
            let e = &layout.entries[pos];
            obs[k].0 = e.offset + rng.gen_range(0..e.size);
            if obs[k].0 == seq.obs_indices[seq.event_range(p).start + k] {
                obs[k].0 = layout.vocab_size - 1 - (obs[k].0 == layout.vocab_size - 1) as u32;
            }
            desc = format!("index of observation {k} of event {p}");
        }
        2 => {
            obs.push((rng.gen_range(1..layout.vocab_size), Some(rng.gen_range(-3.0..3.0))));
            desc = format!("extra observation in event {p}");
        }
        _ => {
            if obs.is_empty() {
                obs.push((1, None));
            } else {
                let k = rng.gen_range(0..obs.len());
                obs[k].1 = Some(obs[k].1.unwrap_or(0.0) + rng.gen_range(0.5..2.0));
            }
            desc = format!("value in event {p}");
        }
    }
    let mut out = SubjectSequence::empty(seq.subject_id, seq.dob, seq.static_indices.clone());
    for (t, o) in events {
        out.push_event(t, o);
    }
    (out, desc)
}

/// Perturbs one event of one sequence in a small batch and checks that no
/// emission of an earlier position (or of another sequence) moves. Each
/// query keeps its original next-event covariates.
pub fn outer_probe<T: Scalar, R: Rng>(
    model: &EventStreamModel<T>,
    seqs: &[SubjectSequence],
    rng: &mut R,
) -> Result<Probe, ModelError> {
    let max_len = model.config.max_seq_len;
    let mut batch: Vec<SubjectSequence> = (0..3)
        .map(|_| {
            let s = seqs.choose(rng).expect("nonempty");
            s.slice(recent_window(s.n_events(), max_len))
        })
        .collect();
    let target = rng.gen_range(0..batch.len());
    if batch[target].n_events() < 2 {
        return Ok(Probe {
            description: "sequence too short".into(),
            max_diff: 0.0,
        });
    }
    let p = rng.gen_range(1..batch[target].n_events());
    let (perturbed, desc) = perturb_event(&model.arch.layout, &batch[target], p, rng);
    let refs: Vec<&SubjectSequence> = batch.iter().collect();
    let windows: Vec<_> = batch.iter().map(|s| 0..s.n_events()).collect();
    let original = collate_windows(&refs, &windows);
    let mut queries = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        let limit = if b == target { p } else { s.n_events() };
        for j in 0..limit {
            queries.push(Query {
                cell: original.event_cell(b, j),
                next: if j + 1 < s.n_events() {
                    next_obs(&original, b, j + 1)
                } else {
                    Vec::new()
                },
                delta: None,
            });
        }
    }
    let before = emissions_for(model, &batch, &queries)?;
    batch[target] = perturbed;
    let after = emissions_for(model, &batch, &queries)?;
    Ok(Probe {
        description: desc,
        max_diff: emission_diff(&before, &after, |_| true),
    })
}

/// Perturbs a stage-`s` covariate of a target event and checks that the TTE
/// output and every head of stage `≤ s` stay fixed.
pub fn stage_probe<T: Scalar, R: Rng>(
    model: &EventStreamModel<T>,
    seqs: &[SubjectSequence],
    rng: &mut R,
) -> Result<Probe, ModelError> {
    let a = &model.arch;
    let s = seqs.choose(rng).expect("nonempty");
    let seq = s.slice(recent_window(s.n_events(), model.config.max_seq_len));
    if seq.n_events() < 2 {
        return Ok(Probe {
            description: "sequence too short".into(),
            max_diff: 0.0,
        });
    }
    let p = rng.gen_range(1..seq.n_events());
    let batch = collate_windows(&[&seq], &[0..seq.n_events()]);
    let next = next_obs(&batch, 0, p);
    let mut changed = next.clone();
    let (stage, desc) = match rng.gen_range(0..3) {
        0 if !next.is_empty() => {
            let k = rng.gen_range(0..next.len());
            let (pos, _) = a.layout.owner(next[k].0).expect("valid index");
            let e = &a.layout.entries[pos];
            changed[k].0 = e.offset + (next[k].0 - e.offset + 1 + rng.gen_range(0..e.size.max(2) - 1)) % e.size;
            (a.input_stage(next[k].0, false), format!("key of {}", e.name))
        }
        1 if next.iter().any(|o| o.1.is_some()) => {
            let ks: Vec<usize> = (0..next.len()).filter(|k| next[*k].1.is_some()).collect();
            let k = *ks.choose(rng).expect("nonempty");
            changed[k].1 = Some(next[k].1.unwrap() + rng.gen_range(0.5..2.0));
            (a.input_stage(next[k].0, true), format!("value of index {}", next[k].0))
        }
        _ => {
            let idx = rng.gen_range(1..a.vocab_size);
            changed.push((idx, Some(rng.gen_range(-2.0..2.0))));
            let st = [a.input_stage(idx, false), a.input_stage(idx, true)]
                .into_iter()
                .flatten()
                .min();
            (st, format!("added index {idx}"))
        }
    };
    let Some(stage) = stage else {
        return Ok(Probe {
            description: format!("{desc} feeds no stage"),
            max_diff: 0.0,
        });
    };
    let q = |next: Vec<(u32, Option<f64>)>| {
        vec![Query {
            cell: batch.event_cell(0, p - 1),
            next,
            delta: None,
        }]
    };
    let before = model.emissions(&batch, &q(next))?;
    let after = model.emissions(&batch, &q(changed))?;
    Ok(Probe {
        description: format!("{desc} (stage {stage}) of event {p}"),
        max_diff: emission_diff(&before, &after, |h| a.heads[h].stage <= stage),
    })
}

/// Largest emission difference between two models over every transition of
/// `seqs`.
pub fn compare_models<T: Scalar>(
    a: &EventStreamModel<T>,
    b: &EventStreamModel<T>,
    seqs: &[SubjectSequence],
) -> Result<f64, ModelError> {
    let refs: Vec<&SubjectSequence> = seqs.iter().collect();
    let windows: Vec<_> = seqs
        .iter()
        .map(|s| recent_window(s.n_events(), a.config.max_seq_len))
        .collect();
    let batch = collate_windows(&refs, &windows);
    let queries = crate::model::transitions(&batch);
    let ea = a.emissions(&batch, &queries)?;
    let eb = b.emissions(&batch, &queries)?;
    Ok(emission_diff(&ea, &eb, |_| true))
}
