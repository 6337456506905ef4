//! Autoregressive trajectory sampling.

use std::collections::BTreeMap;

use evstream_core::config::EVENT_TYPE;
use evstream_core::preprocess::MeasurementArtifacts;
use evstream_core::represent::{self, collate_windows, recent_window, SequenceManifest, SubjectSequence};
use evstream_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{EventStreamModel, HeadKind, ModelError, Query};
use crate::tape::{clamp_log_scale, sigmoid, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_events: usize,
    pub max_horizon_minutes: f64,
    pub temperature: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_events: 32,
            max_horizon_minutes: f64::INFINITY,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEvents,
    MaxHorizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub index: u32,
    pub key: Option<String>,
    /// Normalized value.
    pub value: Option<f64>,
    /// Value in source units.
    pub raw_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedEvent {
    pub time: f64,
    pub covariates: BTreeMap<String, Vec<Covariate>>,
}

impl GeneratedEvent {
    /// Observations as `(global index, normalized value)` pairs.
    pub fn observations(&self) -> Vec<(u32, Option<f64>)> {
        let mut out: Vec<(u32, Option<f64>)> = self.covariates.values().flatten().map(|c| (c.index, c.value)).collect();
        out.sort_by_key(|o| o.0);
        out
    }

    pub fn has(&self, measurement: &str, key: &str) -> bool {
        self.covariates
            .get(measurement)
            .is_some_and(|cs| cs.iter().any(|c| c.key.as_deref() == Some(key)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTrajectory {
    pub subject_id: u64,
    pub prompt_len: usize,
    pub prompt_end_time: f64,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub stop_reason: StopReason,
    pub events: Vec<GeneratedEvent>,
}

/// Rng of trajectory `stream` under `seed`.
pub fn trajectory_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn softmax_sample<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.iter().rposition(|x| *x > 0.0).unwrap_or(0)
}

/// Draws a delta from a `k`-component log-normal mixture row
/// `[logits | means | log-scales]`.
pub fn sample_tte<R: Rng + ?Sized>(params: &[f64], k: usize, temperature: f64, rng: &mut R) -> f64 {
    let c = softmax_sample(&params[..k], temperature, rng);
    let (s, _) = clamp_log_scale(params[2 * k + c]);
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    (params[k + c] + s.exp() * z).exp()
}

/// Samples continuations for a trained model.
pub struct Generator<'a, T> {
    pub model: &'a EventStreamModel<T>,
    pub manifest: &'a SequenceManifest,
    pub options: GenerateOptions,
}

impl<'a, T: Scalar> Generator<'a, T> {
    pub fn new(model: &'a EventStreamModel<T>, manifest: &'a SequenceManifest, options: GenerateOptions) -> Self {
        Self {
            model,
            manifest,
            options,
        }
    }

    /// Samples the event following `context`: time first, then the
    /// functional features at that time, then covariates stage by stage.
    pub fn next_event<R: Rng + ?Sized>(
        &self,
        context: &SubjectSequence,
        rng: &mut R,
    ) -> Result<(f64, Vec<(u32, Option<f64>)>), ModelError> {
        let m = self.model;
        let a = &m.arch;
        let temp = self.options.temperature;
        let n = context.n_events();
        let window = recent_window(n, m.config.max_seq_len);
        let batch = collate_windows(&[context], std::slice::from_ref(&window));
        let cell = batch.event_cell(0, window.len() - 1);

        let mut tape = Tape::new();
        let pv = m.bind(&mut tape);
        let hidden = m.outer(&mut tape, &pv, &batch)?;
        let query = |next: &[(u32, Option<f64>)]| {
            [Query {
                cell,
                next: next.to_vec(),
                delta: None,
            }]
        };
        let em = m.emit(&mut tape, &pv, hidden, &query(&[]))?;
        let tte: Vec<f64> = tape.value(em.tte).row(0).iter().map(|v| v.as_f64()).collect();
        if tte.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteEmission("tte".into()));
        }
        let last = context.event_times[n - 1];
        let mut time = last + sample_tte(&tte, a.k, temp, rng);
        if time <= last {
            time = last.next_up();
        }

        let mut obs = represent::functional_observations(
            &a.layout,
            &self.manifest.artifacts,
            time,
            context.dob,
            context.subject_id,
        )?;
        for stage in 0..a.n_stages {
            if !a.heads.iter().any(|h| h.stage == stage) {
                continue;
            }
            let em = if stage == 0 {
                em.clone()
            } else {
                m.emit(&mut tape, &pv, hidden, &query(&obs))?
            };
            for (h, head) in a.heads.iter().enumerate().filter(|(_, h)| h.stage == stage) {
                let row: Vec<f64> = tape.value(em.heads[h]).row(0).iter().map(|v| v.as_f64()).collect();
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::NonFiniteEmission(head.name.clone()));
                }
                match head.kind {
                    HeadKind::Categorical => {
                        let always = head.name == EVENT_TYPE;
                        let logits = if always { &row[..head.size as usize] } else { &row[..] };
                        let k = softmax_sample(logits, temp, rng);
                        if k < head.size as usize {
                            obs.push((head.offset + k as u32, None));
                        }
                    }
                    HeadKind::Univariate => {
                        if let Some(v) = sample_numeric(&row[0..3], temp, rng) {
                            obs.push((head.offset, Some(v)));
                        }
                    }
                    HeadKind::MultivariateNumeric => {
                        for o in obs.iter_mut().filter(|o| head.contains(o.0) && o.1.is_none()) {
                            let key = (o.0 - head.offset) as usize;
                            o.1 = sample_numeric(&row[3 * key..3 * key + 3], temp, rng);
                        }
                    }
                }
            }
        }
        Ok((time, obs))
    }

    /// Extends `prompt` until `max_events` events are generated or the next
    /// sampled time passes the horizon.
    pub fn trajectory(
        &self,
        prompt: &SubjectSequence,
        seed: u64,
        stream: u64,
    ) -> Result<GeneratedTrajectory, ModelError> {
        if prompt.n_events() == 0 {
            return Err(ModelError::ShapeMismatch("empty prompt".into()));
        }
        let mut rng = trajectory_rng(seed, stream);
        let prompt_end_time = prompt.event_times[prompt.n_events() - 1];
        let mut context = prompt.slice(recent_window(prompt.n_events(), self.model.config.max_seq_len));
        let mut events = Vec::new();
        let mut stop_reason = StopReason::MaxEvents;
        while events.len() < self.options.max_events {
            let (time, obs) = self.next_event(&context, &mut rng)?;
            if time - prompt_end_time > self.options.max_horizon_minutes {
                stop_reason = StopReason::MaxHorizon;
                break;
            }
            events.push(self.describe(time, &obs));
            context.push_event(time, obs);
            if context.n_events() > self.model.config.max_seq_len {
                context = context.slice(recent_window(context.n_events(), self.model.config.max_seq_len));
            }
        }
        Ok(GeneratedTrajectory {
            subject_id: prompt.subject_id,
            prompt_len: prompt.n_events(),
            prompt_end_time,
            rng_seed: seed,
            rng_stream: stream,
            stop_reason,
            events,
        })
    }

    /// One trajectory per prompt, in parallel; prompt `i` uses stream `i`.
    pub fn trajectories(&self, prompts: &[SubjectSequence], seed: u64) -> Result<Vec<GeneratedTrajectory>, ModelError> {
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.trajectory(p, seed, i as u64))
            .collect()
    }

    /// Names, keys and source-unit values of raw observations.
    pub fn describe(&self, time: f64, obs: &[(u32, Option<f64>)]) -> GeneratedEvent {
        let layout = &self.model.arch.layout;
        let mut covariates: BTreeMap<String, Vec<Covariate>> = BTreeMap::new();
        for &(index, value) in obs {
            let Some((pos, local)) = layout.owner(index) else {
                continue;
            };
            let name = &layout.entries[pos].name;
            let art = self.manifest.artifacts.get(name).ok();
            let key = art
                .and_then(|a| a.vocabulary())
                .and_then(|v| v.entries.get(local as usize).cloned());
            let raw_value = match (art, value) {
                (Some(MeasurementArtifacts::Univariate { stats }), Some(v)) => Some(stats.denormalize(v)),
                (Some(MeasurementArtifacts::Multivariate { stats, .. }), Some(v)) => {
                    stats.get(local as usize).map(|s| s.denormalize(v))
                }
                _ => None,
            };
            covariates.entry(name.clone()).or_default().push(Covariate {
                index,
                key,
                value,
                raw_value,
            });
        }
        GeneratedEvent { time, covariates }
    }
}

fn sample_numeric<R: Rng + ?Sized>(p: &[f64], temperature: f64, rng: &mut R) -> Option<f64> {
    if rng.gen::<f64>() >= sigmoid(p[0] / temperature) {
        return None;
    }
    let (s, _) = clamp_log_scale(p[2]);
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    Some(p[1] + s.exp() * z)
}
