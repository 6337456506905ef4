//! Mini-batch training with data-parallel gradient accumulation.

use evstream_core::represent::{collate_windows, random_window, recent_window, SubjectSequence};
use evstream_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{EventStreamModel, LossBreakdown, ModelError};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Sequences per data-parallel chunk. Fixed so that the reduction order, and
/// therefore the result, does not depend on the thread count.
pub const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    /// Mean loss per transition before the update.
    pub loss: f64,
    pub n_transitions: usize,
}

/// Summed losses and gradients of `seqs` under `windows`, chunked and
/// reduced in input order.
pub fn accumulate<T: Scalar>(
    model: &EventStreamModel<T>,
    seqs: &[&SubjectSequence],
    windows: &[std::ops::Range<usize>],
) -> Result<(LossBreakdown, Vec<Tensor<T>>), ModelError> {
    let parts: Vec<Result<(LossBreakdown, Vec<Tensor<T>>), ModelError>> = seqs
        .par_chunks(CHUNK)
        .zip(windows.par_chunks(CHUNK))
        .map(|(s, w)| model.loss_and_grad(&collate_windows(s, w)))
        .collect();
    let mut total: Option<(LossBreakdown, Vec<Tensor<T>>)> = None;
    for part in parts {
        let (l, g) = part?;
        match &mut total {
            None => total = Some((l, g)),
            Some((tl, tg)) => {
                add_breakdown(tl, &l);
                for (a, b) in tg.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
        }
    }
    Ok(total.unwrap_or_else(|| {
        (
            LossBreakdown {
                total: 0.0,
                tte: 0.0,
                heads: vec![0.0; model.arch.heads.len()],
                n_transitions: 0,
                n_tte_terms: 0,
            },
            model.params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
        )
    }))
}

pub fn add_breakdown(total: &mut LossBreakdown, part: &LossBreakdown) {
    total.total += part.total;
    total.tte += part.tte;
    for (a, b) in total.heads.iter_mut().zip(&part.heads) {
        *a += *b;
    }
    total.n_transitions += part.n_transitions;
    total.n_tte_terms += part.n_tte_terms;
}

/// Teacher-forced loss over whole sequences, each truncated to its most
/// recent `max_seq_len` events; independent of how sequences are chunked.
pub fn evaluate_sequences<T: Scalar>(
    model: &EventStreamModel<T>,
    seqs: &[SubjectSequence],
) -> Result<LossBreakdown, ModelError> {
    let refs: Vec<&SubjectSequence> = seqs.iter().collect();
    let windows: Vec<_> = seqs
        .iter()
        .map(|s| recent_window(s.n_events(), model.config.max_seq_len))
        .collect();
    let parts: Vec<Result<LossBreakdown, ModelError>> = refs
        .par_chunks(CHUNK)
        .zip(windows.par_chunks(CHUNK))
        .map(|(s, w)| model.evaluate_loss(&collate_windows(s, w)))
        .collect();
    let mut total = LossBreakdown {
        total: 0.0,
        tte: 0.0,
        heads: vec![0.0; model.arch.heads.len()],
        n_transitions: 0,
        n_tte_terms: 0,
    };
    for p in parts {
        add_breakdown(&mut total, &p?);
    }
    Ok(total)
}

pub struct Trainer<T> {
    pub model: EventStreamModel<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
    pub options: TrainOptions,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: EventStreamModel<T>, options: TrainOptions) -> Self {
        let optimizer = Adam::new(&model.params, model.config.learning_rate);
        Self {
            model,
            optimizer,
            step: 0,
            options,
            rng: ChaCha8Rng::seed_from_u64(options.seed ^ 0x7472_6169_6e00),
        }
    }

    /// One Adam step on a random batch of random windows. Sequences with a
    /// single event carry no transition and are never drawn.
    pub fn train_step(&mut self, seqs: &[SubjectSequence]) -> Result<StepLog, ModelError> {
        let eligible: Vec<&SubjectSequence> = seqs.iter().filter(|s| s.n_events() >= 2).collect();
        if eligible.is_empty() {
            return Err(ModelError::ShapeMismatch("no sequence has two events".into()));
        }
        let max_len = self.model.config.max_seq_len;
        let mut batch = Vec::with_capacity(self.options.batch_size);
        let mut windows = Vec::with_capacity(self.options.batch_size);
        for _ in 0..self.options.batch_size {
            let s = eligible[self.rng.gen_range(0..eligible.len())];
            windows.push(random_window(s.n_events(), max_len.max(2), &mut self.rng));
            batch.push(s);
        }
        let (loss, mut grads) = accumulate(&self.model, &batch, &windows)?;
        let n = loss.n_transitions.max(1);
        let scale = T::of(1.0 / n as f64);
        for (g, spec) in grads.iter_mut().zip(&self.model.arch.params) {
            for x in &mut g.data {
                *x *= scale;
            }
            if !g.is_finite() {
                return Err(ModelError::NonFiniteGradient(spec.name.clone()));
            }
        }
        self.optimizer.step(&mut self.model.params, &grads);
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss: loss.total / n as f64,
            n_transitions: loss.n_transitions,
        })
    }
}
