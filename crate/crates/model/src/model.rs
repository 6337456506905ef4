//! The event-stream transformer: architecture, parameters, forward pass and
//! negative log-likelihood.

use std::collections::HashMap;
use std::sync::Arc;

use evstream_core::config::{Component, ConfigError, ModelConfig, ProcessingMode, Temporality, ValueKind};
use evstream_core::functional::FunctionalError;
use evstream_core::represent::{FeatureLayout, SparseBatch, PADDING_INDEX};
use evstream_core::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{AttentionShape, Groups, NumericTarget, Tape, Var};
use crate::temporal::temporal_encode;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("negative time delta {0}")]
    NegativeDelta(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dependency graph mismatch: {0}")]
    GraphMismatch(String),
    #[error("non-finite loss in `{0}`")]
    NonFinite(String),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite emission in `{0}`")]
    NonFiniteEmission(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Ratio of the feed-forward width to the hidden width.
pub const FF_MULT: usize = 4;
/// Largest initial TTE component mean, in log-minutes.
pub const TTE_INIT_MAX_LOG_MINUTES: f64 = 9.210_340_371_976_184;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Logits over the vocabulary plus a trailing "absent" slot.
    Categorical,
    /// Presence logit, mean and log-scale.
    Univariate,
    /// Per key: presence logit, mean and log-scale of its value.
    MultivariateNumeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub name: String,
    pub kind: HeadKind,
    pub entry: usize,
    pub offset: u32,
    pub size: u32,
    pub stage: usize,
}

impl Head {
    pub fn width(&self) -> usize {
        match self.kind {
            HeadKind::Categorical => self.size as usize + 1,
            HeadKind::Univariate => 3,
            HeadKind::MultivariateNumeric => 3 * self.size as usize,
        }
    }

    pub fn contains(&self, index: u32) -> bool {
        index >= self.offset && index < self.offset + self.size
    }
}

/// Stage token fed by each part of an entry's observations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Route {
    categorical: Option<usize>,
    numerical: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Embedding(f64),
    Ones,
    Zeros,
    TteBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    data_emb: usize,
    static_emb: usize,
    layers: Vec<BlockSlots>,
    final_g: usize,
    final_b: usize,
    inner: BlockSlots,
    inner_g: usize,
    inner_b: usize,
    tte_w: usize,
    tte_b: usize,
    heads: Vec<(usize, usize)>,
}

/// Shapes and wiring derived from a feature layout and a model config.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub d: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub k: usize,
    pub vocab_size: u32,
    /// Stage tokens per event; 1 in conditionally independent mode.
    pub n_stages: usize,
    pub heads: Vec<Head>,
    pub layout: FeatureLayout,
    routes: Vec<Route>,
    head_of_entry: Vec<[Option<usize>; 2]>,
    pub params: Vec<ParamSpec>,
    slots: Slots,
}

impl Architecture {
    pub fn new(layout: &FeatureLayout, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate_shape()?;
        let kinds: HashMap<String, ValueKind> = layout.entries.iter().map(|e| (e.name.clone(), e.kind)).collect();
        let (n_stages, stages) = match (config.structured_event_processing_mode, &config.dependency_graph) {
            (ProcessingMode::NestedAttention, Some(graph)) => {
                for t in graph.stages.iter().flatten() {
                    match layout.entry(&t.measurement) {
                        None => {
                            return Err(ModelError::GraphMismatch(format!(
                                "`{}` is not in the dataset",
                                t.measurement
                            )))
                        }
                        Some(e) if e.temporality == Temporality::Static => {
                            return Err(ModelError::GraphMismatch(format!("`{}` is static", t.measurement)))
                        }
                        _ => {}
                    }
                }
                (graph.stages.len(), Some(graph.component_stages(&kinds)))
            }
            _ => (1, None),
        };
        let stage_of = |name: &str, c: Component| -> Result<usize, ModelError> {
            match &stages {
                None => Ok(0),
                Some(s) => s
                    .get(&(name.to_string(), c))
                    .copied()
                    .ok_or_else(|| ModelError::GraphMismatch(format!("`{name}` has no stage"))),
            }
        };

        let mut heads = Vec::new();
        let mut routes = Vec::new();
        let mut head_of_entry = Vec::new();
        for (pos, e) in layout.entries.iter().enumerate() {
            let mut route = Route::default();
            let mut own = [None, None];
            match e.temporality {
                Temporality::Static => {}
                Temporality::FunctionalTimeDependent => {
                    if let Some(s) = &stages {
                        route.categorical = s.get(&(e.name.clone(), Component::Categorical)).copied();
                        route.numerical = s.get(&(e.name.clone(), Component::Numerical)).copied();
                    }
                }
                Temporality::Dynamic => {
                    if e.kind.has_keys() {
                        let stage = stage_of(&e.name, Component::Categorical)?;
                        own[0] = Some(heads.len());
                        heads.push(Head {
                            name: e.name.clone(),
                            kind: HeadKind::Categorical,
                            entry: pos,
                            offset: e.offset,
                            size: e.size,
                            stage,
                        });
                        route.categorical = stages.as_ref().map(|_| stage);
                    }
                    if e.kind.has_values() {
                        let stage = stage_of(&e.name, Component::Numerical)?;
                        own[1] = Some(heads.len());
                        heads.push(Head {
                            name: e.name.clone(),
                            kind: if e.kind == ValueKind::UnivariateRegression {
                                HeadKind::Univariate
                            } else {
                                HeadKind::MultivariateNumeric
                            },
                            entry: pos,
                            offset: e.offset,
                            size: e.size,
                            stage,
                        });
                        route.numerical = stages.as_ref().map(|_| stage);
                    }
                }
            }
            routes.push(route);
            head_of_entry.push(own);
        }

        let d = config.hidden_dim;
        let k = config.tte_mixture_components;
        let v = layout.vocab_size as usize;
        let mut params = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, init: Init| {
            params.push(ParamSpec { name, rows, cols, init });
            params.len() - 1
        };
        let emb_std = 1.0 / (d as f64).sqrt();
        let data_emb = add("data_embedding".into(), v, d, Init::Embedding(emb_std));
        let static_emb = add("static_embedding".into(), v, d, Init::Embedding(emb_std));
        let block = |prefix: String, add: &mut dyn FnMut(String, usize, usize, Init) -> usize| BlockSlots {
            ln1_g: add(format!("{prefix}.ln1.gain"), 1, d, Init::Ones),
            ln1_b: add(format!("{prefix}.ln1.bias"), 1, d, Init::Zeros),
            wq: add(format!("{prefix}.attn.q"), d, d, Init::Normal(1.0 / (d as f64).sqrt())),
            wk: add(format!("{prefix}.attn.k"), d, d, Init::Normal(1.0 / (d as f64).sqrt())),
            wv: add(format!("{prefix}.attn.v"), d, d, Init::Normal(1.0 / (d as f64).sqrt())),
            wo: add(format!("{prefix}.attn.o"), d, d, Init::Normal(1.0 / (d as f64).sqrt())),
            ln2_g: add(format!("{prefix}.ln2.gain"), 1, d, Init::Ones),
            ln2_b: add(format!("{prefix}.ln2.bias"), 1, d, Init::Zeros),
            w1: add(
                format!("{prefix}.ff.w1"),
                d,
                FF_MULT * d,
                Init::Normal(1.0 / (d as f64).sqrt()),
            ),
            b1: add(format!("{prefix}.ff.b1"), 1, FF_MULT * d, Init::Zeros),
            w2: add(
                format!("{prefix}.ff.w2"),
                FF_MULT * d,
                d,
                Init::Normal(1.0 / ((FF_MULT * d) as f64).sqrt()),
            ),
            b2: add(format!("{prefix}.ff.b2"), 1, d, Init::Zeros),
        };
        let layers = (0..config.num_layers)
            .map(|l| block(format!("layer{l}"), &mut add))
            .collect();
        let final_g = add("final_ln.gain".into(), 1, d, Init::Ones);
        let final_b = add("final_ln.bias".into(), 1, d, Init::Zeros);
        let inner = block("inner".into(), &mut add);
        let inner_g = add("inner_ln.gain".into(), 1, d, Init::Ones);
        let inner_b = add("inner_ln.bias".into(), 1, d, Init::Zeros);
        let tte_w = add("head.tte.w".into(), d, 3 * k, Init::Zeros);
        let tte_b = add("head.tte.b".into(), 1, 3 * k, Init::TteBias);
        let head_slots = heads
            .iter()
            .map(|h| {
                let tag = match h.kind {
                    HeadKind::Categorical => "categorical",
                    HeadKind::Univariate => "univariate",
                    HeadKind::MultivariateNumeric => "multivariate",
                };
                (
                    add(format!("head.{}.{tag}.w", h.name), d, h.width(), Init::Zeros),
                    add(format!("head.{}.{tag}.b", h.name), 1, h.width(), Init::Zeros),
                )
            })
            .collect();
        let slots = Slots {
            data_emb,
            static_emb,
            layers,
            final_g,
            final_b,
            inner,
            inner_g,
            inner_b,
            tte_w,
            tte_b,
            heads: head_slots,
        };
        Ok(Self {
            d,
            num_layers: config.num_layers,
            num_heads: config.num_heads,
            k,
            vocab_size: layout.vocab_size,
            n_stages,
            heads,
            layout: layout.clone(),
            routes,
            head_of_entry,
            params,
            slots,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.rows * p.cols).sum()
    }

    pub fn head_index(&self, name: &str, kind: HeadKind) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name && h.kind == kind)
    }

    /// Categorical and numeric head of the entry owning `index`.
    pub fn heads_of(&self, index: u32) -> [Option<usize>; 2] {
        self.layout
            .owner(index)
            .map(|(pos, _)| self.head_of_entry[pos])
            .unwrap_or([None, None])
    }

    /// Stage of the observation part (categorical or numerical) that
    /// `index` feeds as an intra-event input; `None` when it feeds none.
    pub fn input_stage(&self, index: u32, numerical: bool) -> Option<usize> {
        let (pos, _) = self.layout.owner(index)?;
        let r = self.routes[pos];
        if numerical {
            r.numerical
        } else {
            r.categorical.or(r.numerical)
        }
    }

    /// Parameter indices of head `h`'s weight and bias.
    pub fn head_params(&self, h: usize) -> (usize, usize) {
        self.slots.heads[h]
    }

    /// Parameter indices of the TTE head's weight and bias.
    pub fn tte_params(&self) -> (usize, usize) {
        (self.slots.tte_w, self.slots.tte_b)
    }

    /// Seeded initialization.
    pub fn init<T: Scalar>(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params
            .iter()
            .map(|p| {
                let mut t = Tensor::zeros(p.rows, p.cols);
                match p.init {
                    Init::Normal(std) | Init::Embedding(std) => {
                        let n = Normal::new(0.0, std).expect("positive std");
                        for x in &mut t.data {
                            *x = T::of(n.sample(&mut rng));
                        }
                        if matches!(p.init, Init::Embedding(_)) {
                            t.row_mut(PADDING_INDEX as usize).fill(T::zero());
                        }
                    }
                    Init::Ones => t.data.fill(T::one()),
                    Init::Zeros => {}
                    Init::TteBias => {
                        let k = self.k;
                        for j in 0..k {
                            let mean = if k == 1 {
                                TTE_INIT_MAX_LOG_MINUTES / 2.0
                            } else {
                                TTE_INIT_MAX_LOG_MINUTES * j as f64 / (k - 1) as f64
                            };
                            t.data[k + j] = T::of(mean);
                        }
                    }
                }
                t
            })
            .collect()
    }

    /// Stage token an observation part feeds, given its route stage.
    fn token_of(&self, stage: Option<usize>) -> Option<usize> {
        stage.map(|s| s + 1).filter(|t| *t < self.n_stages)
    }
}

/// One emission request: the hidden state at `cell` predicts the event
/// described by `next` (possibly partial) arriving `delta` minutes later.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub cell: usize,
    pub next: Vec<(u32, Option<f64>)>,
    pub delta: Option<f64>,
}

/// Teacher-forced queries for every consecutive pair of real events.
pub fn transitions(batch: &SparseBatch) -> Vec<Query> {
    let mut out = Vec::new();
    for b in 0..batch.batch_size {
        for s in 0..batch.lengths[b].saturating_sub(1) {
            let cell = batch.event_cell(b, s);
            out.push(Query {
                cell,
                next: next_obs(batch, b, s + 1),
                delta: Some(batch.time_deltas[cell + 1]),
            });
        }
    }
    out
}

/// Observations of event `s` of row `b`.
pub fn next_obs(batch: &SparseBatch, b: usize, s: usize) -> Vec<(u32, Option<f64>)> {
    batch
        .obs_range(b, s)
        .filter(|k| batch.obs_indices[*k] != PADDING_INDEX)
        .map(|k| {
            (
                batch.obs_indices[k],
                batch.obs_value_mask[k].then_some(batch.obs_values[k]),
            )
        })
        .collect()
}

/// Emission parameters of a set of queries, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionParams<T> {
    /// `[weight logits | means | log-scales]` of the TTE mixture.
    pub tte: Tensor<T>,
    pub heads: Vec<Tensor<T>>,
}

/// Tape handles of the head outputs.
#[derive(Debug, Clone)]
pub struct EmissionVars {
    pub tte: Var,
    pub heads: Vec<Var>,
}

/// Tape handles of the summed loss and its per-head parts.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub tte: Var,
    pub heads: Vec<Var>,
    pub n_transitions: usize,
    pub n_tte_terms: usize,
}

/// Summed loss of a batch with its per-head breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub tte: f64,
    pub heads: Vec<f64>,
    pub n_transitions: usize,
    pub n_tte_terms: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStreamModel<T> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> EventStreamModel<T> {
    pub fn new(layout: &FeatureLayout, config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let arch = Architecture::new(layout, config)?;
        let params = arch.init(seed);
        Ok(Self {
            config: config.clone(),
            arch,
            params,
        })
    }

    pub fn mode(&self) -> ProcessingMode {
        self.config.structured_event_processing_mode
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf_ref(p)).collect()
    }

    fn block(
        &self,
        tape: &mut Tape<'_, T>,
        pv: &[Var],
        x: Var,
        s: &BlockSlots,
        shape: AttentionShape,
        mask: Option<&[bool]>,
    ) -> Var {
        let h = tape.layer_norm(x, pv[s.ln1_g], pv[s.ln1_b]);
        let q = tape.matmul(h, pv[s.wq]);
        let k = tape.matmul(h, pv[s.wk]);
        let v = tape.matmul(h, pv[s.wv]);
        let a = tape.attention(q, k, v, shape, mask);
        let o = tape.matmul(a, pv[s.wo]);
        let x = tape.add(x, o);
        let h = tape.layer_norm(x, pv[s.ln2_g], pv[s.ln2_b]);
        let f = tape.matmul(h, pv[s.w1]);
        let f = tape.add_row(f, pv[s.b1]);
        let f = tape.gelu(f);
        let f = tape.matmul(f, pv[s.w2]);
        let f = tape.add_row(f, pv[s.b2]);
        tape.add(x, f)
    }

    /// Causal outer transformer over event positions; row `cell` of the
    /// result is the history representation through that event.
    pub fn outer(&self, tape: &mut Tape<'_, T>, pv: &[Var], batch: &SparseBatch) -> Result<Var, ModelError> {
        let a = &self.arch;
        let cells = batch.batch_size * batch.max_events;
        let mut data = Groups::new();
        let mut statics = Groups::new();
        for b in 0..batch.batch_size {
            for s in 0..batch.max_events {
                let cell = batch.event_cell(b, s);
                if !batch.event_mask[cell] {
                    data.push([]);
                    statics.push([]);
                    continue;
                }
                let mut obs = Vec::new();
                for k in batch.obs_range(b, s) {
                    let idx = batch.obs_indices[k];
                    if idx == PADDING_INDEX {
                        continue;
                    }
                    self.check_index(idx)?;
                    let w = if batch.obs_value_mask[k] {
                        batch.obs_values[k]
                    } else {
                        1.0
                    };
                    obs.push((idx, T::of(w)));
                }
                data.push(obs);
                for &idx in &batch.static_indices[b] {
                    self.check_index(idx)?;
                }
                statics.push(batch.static_indices[b].iter().map(|i| (*i, T::one())));
            }
        }
        let mut enc = temporal_encode::<T>(&batch.time_deltas, a.d)?;
        for (cell, real) in batch.event_mask.iter().enumerate() {
            if !real {
                enc.row_mut(cell).fill(T::zero());
            }
        }
        debug_assert_eq!(enc.rows, cells);
        let x = tape.embed(pv[a.slots.data_emb], Arc::new(data));
        let st = tape.embed(pv[a.slots.static_emb], Arc::new(statics));
        let x = tape.add(x, st);
        let enc = tape.leaf(enc);
        let mut x = tape.add(x, enc);
        let shape = AttentionShape {
            n_seq: batch.batch_size,
            seq_len: batch.max_events,
            heads: a.num_heads,
            causal: true,
        };
        for layer in &a.slots.layers {
            x = self.block(tape, pv, x, layer, shape, Some(&batch.event_mask));
        }
        Ok(tape.layer_norm(x, pv[a.slots.final_g], pv[a.slots.final_b]))
    }

    fn check_index(&self, idx: u32) -> Result<(), ModelError> {
        if idx >= self.arch.vocab_size {
            return Err(ModelError::ShapeMismatch(format!(
                "feature index {idx} outside vocabulary of {}",
                self.arch.vocab_size
            )));
        }
        Ok(())
    }

    /// Inner pass over per-query stage tokens followed by the emission heads.
    pub fn emit(
        &self,
        tape: &mut Tape<'_, T>,
        pv: &[Var],
        hidden: Var,
        queries: &[Query],
    ) -> Result<EmissionVars, ModelError> {
        let a = &self.arch;
        let g = a.n_stages;
        let rows: Vec<Option<usize>> = queries
            .iter()
            .flat_map(|q| std::iter::repeat_n(Some(q.cell), g))
            .collect();
        let mut u = tape.select_rows(hidden, Arc::new(rows));
        if g > 1 {
            let mut groups = Groups::new();
            let mut any = false;
            for q in queries {
                let mut tokens: Vec<Vec<(u32, T)>> = vec![Vec::new(); g];
                for &(idx, value) in &q.next {
                    self.check_index(idx)?;
                    let Some((pos, _)) = a.layout.owner(idx) else {
                        continue;
                    };
                    let route = a.routes[pos];
                    let (tc, tn) = (a.token_of(route.categorical), a.token_of(route.numerical));
                    if tc.is_some() && tc == tn {
                        tokens[tc.unwrap()].push((idx, T::of(value.unwrap_or(1.0))));
                        continue;
                    }
                    if let Some(t) = tc {
                        tokens[t].push((idx, T::one()));
                    }
                    if let (Some(t), Some(v)) = (tn, value) {
                        tokens[t].push((idx, T::of(v)));
                    }
                }
                for t in tokens {
                    any |= !t.is_empty();
                    groups.push(t);
                }
            }
            if any {
                let e = tape.embed(pv[a.slots.data_emb], Arc::new(groups));
                u = tape.add(u, e);
            }
        }
        let shape = AttentionShape {
            n_seq: queries.len(),
            seq_len: g,
            heads: a.num_heads,
            causal: true,
        };
        let z = self.block(tape, pv, u, &a.slots.inner, shape, None);
        let z = tape.layer_norm(z, pv[a.slots.inner_g], pv[a.slots.inner_b]);

        let mut stage_rows: Vec<Option<Var>> = vec![None; g];
        let mut stage = |tape: &mut Tape<'_, T>, s: usize| -> Var {
            *stage_rows[s].get_or_insert_with(|| {
                let rows = (0..queries.len()).map(|q| Some(q * g + s)).collect();
                tape.select_rows(z, Arc::new(rows))
            })
        };
        let z0 = stage(tape, 0);
        let tte = tape.matmul(z0, pv[a.slots.tte_w]);
        let tte = tape.add_row(tte, pv[a.slots.tte_b]);
        let mut heads = Vec::with_capacity(a.heads.len());
        for (h, (w, b)) in a.heads.iter().zip(&a.slots.heads) {
            let zs = stage(tape, h.stage);
            let o = tape.matmul(zs, pv[*w]);
            heads.push(tape.add_row(o, pv[*b]));
        }
        Ok(EmissionVars { tte, heads })
    }

    /// Summed negative log-likelihood of each query's `next` event.
    pub fn loss(&self, tape: &mut Tape<'_, T>, em: &EmissionVars, queries: &[Query]) -> Result<LossVars, ModelError> {
        let a = &self.arch;
        let tte_targets: Vec<(usize, T)> = queries
            .iter()
            .enumerate()
            .filter_map(|(q, x)| x.delta.filter(|d| *d > 0.0).map(|d| (q, T::of(d))))
            .collect();
        let n_tte_terms = tte_targets.len();
        let tte = tape.tte_nll(em.tte, a.k, &tte_targets);
        let mut heads = Vec::with_capacity(a.heads.len());
        for (h, head) in a.heads.iter().enumerate() {
            let part = match head.kind {
                HeadKind::Categorical => {
                    let mut targets = Vec::new();
                    for (q, x) in queries.iter().enumerate() {
                        let before = targets.len();
                        targets.extend(
                            x.next
                                .iter()
                                .filter(|(i, _)| head.contains(*i))
                                .map(|(i, _)| (q, (*i - head.offset) as usize)),
                        );
                        if targets.len() == before {
                            targets.push((q, head.size as usize));
                        }
                    }
                    tape.categorical_nll(em.heads[h], &targets)
                }
                HeadKind::Univariate => {
                    let targets: Vec<NumericTarget<T>> = queries
                        .iter()
                        .enumerate()
                        .map(|(q, x)| {
                            let value = x.next.iter().find(|(i, _)| *i == head.offset).and_then(|(_, v)| *v);
                            NumericTarget {
                                row: q,
                                presence_col: 0,
                                mean_col: 1,
                                log_scale_col: 2,
                                present: value.is_some(),
                                value: value.map(T::of),
                            }
                        })
                        .collect();
                    tape.numeric_nll(em.heads[h], &targets)
                }
                HeadKind::MultivariateNumeric => {
                    let targets: Vec<NumericTarget<T>> = queries
                        .iter()
                        .enumerate()
                        .flat_map(|(q, x)| {
                            x.next.iter().filter(|(i, _)| head.contains(*i)).map(move |(i, v)| {
                                let key = (*i - head.offset) as usize;
                                NumericTarget {
                                    row: q,
                                    presence_col: 3 * key,
                                    mean_col: 3 * key + 1,
                                    log_scale_col: 3 * key + 2,
                                    present: v.is_some(),
                                    value: v.map(T::of),
                                }
                            })
                        })
                        .collect();
                    tape.numeric_nll(em.heads[h], &targets)
                }
            };
            heads.push(part);
        }
        let mut parts = vec![tte];
        parts.extend(&heads);
        for (i, p) in parts.iter().enumerate() {
            if !tape.value(*p).is_finite() {
                let name = if i == 0 {
                    "tte".to_string()
                } else {
                    a.heads[i - 1].name.clone()
                };
                return Err(ModelError::NonFinite(name));
            }
        }
        let total = tape.sum(parts);
        Ok(LossVars {
            total,
            tte,
            heads,
            n_transitions: queries.len(),
            n_tte_terms,
        })
    }

    /// Emission parameters for `queries` against `batch`.
    pub fn emissions(&self, batch: &SparseBatch, queries: &[Query]) -> Result<EmissionParams<T>, ModelError> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let hidden = self.outer(&mut tape, &pv, batch)?;
        let em = self.emit(&mut tape, &pv, hidden, queries)?;
        Ok(EmissionParams {
            tte: tape.value(em.tte).clone(),
            heads: em.heads.iter().map(|h| tape.value(*h).clone()).collect(),
        })
    }

    /// Final outer hidden states, one row per batch cell.
    pub fn hidden(&self, batch: &SparseBatch) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let hidden = self.outer(&mut tape, &pv, batch)?;
        Ok(tape.value(hidden).clone())
    }

    /// Teacher-forced summed loss of every transition in `batch`.
    pub fn evaluate_loss(&self, batch: &SparseBatch) -> Result<LossBreakdown, ModelError> {
        let queries = transitions(batch);
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let hidden = self.outer(&mut tape, &pv, batch)?;
        let em = self.emit(&mut tape, &pv, hidden, &queries)?;
        let l = self.loss(&mut tape, &em, &queries)?;
        Ok(breakdown(&tape, &l))
    }

    /// Teacher-forced transitions of `batch` with their summed loss and
    /// emission parameters.
    pub fn teacher_forced(
        &self,
        batch: &SparseBatch,
    ) -> Result<(Vec<Query>, LossBreakdown, EmissionParams<T>), ModelError> {
        let queries = transitions(batch);
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let hidden = self.outer(&mut tape, &pv, batch)?;
        let em = self.emit(&mut tape, &pv, hidden, &queries)?;
        let l = self.loss(&mut tape, &em, &queries)?;
        let params = EmissionParams {
            tte: tape.value(em.tte).clone(),
            heads: em.heads.iter().map(|h| tape.value(*h).clone()).collect(),
        };
        Ok((queries, breakdown(&tape, &l), params))
    }

    /// Summed loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &SparseBatch) -> Result<(LossBreakdown, Vec<Tensor<T>>), ModelError> {
        let queries = transitions(batch);
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let hidden = self.outer(&mut tape, &pv, batch)?;
        let em = self.emit(&mut tape, &pv, hidden, &queries)?;
        let l = self.loss(&mut tape, &em, &queries)?;
        let mut grads = tape.backward(l.total);
        let out = pv
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads[v.index()].take().unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
            .collect();
        Ok((breakdown(&tape, &l), out))
    }
}

fn breakdown<T: Scalar>(tape: &Tape<'_, T>, l: &LossVars) -> LossBreakdown {
    let val = |v: Var| tape.value(v).data[0].as_f64();
    LossBreakdown {
        total: val(l.total),
        tte: val(l.tte),
        heads: l.heads.iter().map(|h| val(*h)).collect(),
        n_transitions: l.n_transitions,
        n_tte_terms: l.n_tte_terms,
    }
}
