mod common;

use common::{config, fixture, flat_graph, na_config};
use evstream_core::config::{ModelConfig, ProcessingMode, EVENT_TYPE};
use evstream_core::metrics::lognormal_mixture_log_pdf;
use evstream_core::represent::{collate_windows, recent_window, SubjectSequence};
use evstream_model::checkpoint;
use evstream_model::diagnostics::{
    compare_models, gradient_check, max_abs_diff, outer_probe, random_sequence, randomize, stage_probe,
};
use evstream_model::model::{transitions, HeadKind, Query};
use evstream_model::tape::Tape;
use evstream_model::tensor::Tensor;
use evstream_model::train::{evaluate_sequences, TrainOptions, Trainer};
use evstream_model::{EventStreamModel, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seqs(f: &common::Fixture, n: usize) -> Vec<SubjectSequence> {
    f.train.iter().filter(|s| s.n_events() >= 3).take(n).cloned().collect()
}

fn random_model(f: &common::Fixture, cfg: &ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(&f.manifest.layout, cfg, seed).unwrap();
    randomize(&mut m, 0.2, &mut ChaCha8Rng::seed_from_u64(seed));
    m
}

fn check_gradients(cfg: ModelConfig) {
    let f = fixture();
    let m = random_model(&f, &cfg, 1);
    let data = seqs(&f, 3);
    let refs: Vec<&SubjectSequence> = data.iter().collect();
    let windows: Vec<_> = data.iter().map(|s| recent_window(s.n_events(), 6)).collect();
    let batch = collate_windows(&refs, &windows);
    let checks = gradient_check(&m, &batch, 100, 1e-4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .unwrap();
    assert!(worst.rel_error < 1e-3, "{worst:?}");
}

#[test]
fn gradients_match_finite_differences_ci() {
    check_gradients(config(ProcessingMode::ConditionallyIndependent, 8, 2));
}

#[test]
fn gradients_match_finite_differences_na() {
    check_gradients(na_config(8, 2));
}

#[test]
fn future_events_never_change_past_emissions() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cfg in [
        config(ProcessingMode::ConditionallyIndependent, 16, 2),
        na_config(16, 2),
    ] {
        let m = random_model(&f, &cfg, 4);
        for _ in 0..60 {
            let p = outer_probe(&m, &f.train, &mut rng).unwrap();
            assert!(!p.violated(), "{p:?}");
        }
    }
}

#[test]
fn later_stages_never_change_earlier_heads() {
    let f = fixture();
    let m = random_model(&f, &na_config(16, 2), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let p = stage_probe(&m, &f.train, &mut rng).unwrap();
        assert!(!p.violated(), "{p:?}");
    }
}

#[test]
fn later_stage_inputs_reach_later_heads() {
    let f = fixture();
    let m = random_model(&f, &na_config(16, 2), 7);
    let a = &m.arch;
    let seq = seqs(&f, 1).remove(0);
    let batch = collate_windows(&[&seq], &[0..seq.n_events()]);
    let item = a.layout.entry("lab_item").unwrap().offset;
    let q = |key: u32| {
        vec![Query {
            cell: batch.event_cell(0, 0),
            next: vec![(1, None), (item + key, None)],
            delta: None,
        }]
    };
    let e1 = m.emissions(&batch, &q(1)).unwrap();
    let e2 = m.emissions(&batch, &q(2)).unwrap();
    let h = a.head_index("lab_value", HeadKind::Univariate).unwrap();
    assert!(max_abs_diff(&e1.heads[h], &e2.heads[h]) > 1e-6);
}

#[test]
fn flat_nested_attention_matches_conditional_independence() {
    let f = fixture();
    let ci = random_model(&f, &config(ProcessingMode::ConditionallyIndependent, 16, 2), 8);
    let na_cfg = ModelConfig {
        structured_event_processing_mode: ProcessingMode::NestedAttention,
        dependency_graph: Some(flat_graph(&f.manifest)),
        ..ci.config.clone()
    };
    let mut na = Model::new(&f.manifest.layout, &na_cfg, 0).unwrap();
    assert_eq!(na.params.len(), ci.params.len());
    na.params = ci.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..20 {
        let batch: Vec<SubjectSequence> = (0..3)
            .map(|j| random_sequence(&f.manifest.layout, j, 2 + (i + j as usize) % 10, &mut rng))
            .collect();
        assert!(compare_models(&ci, &na, &batch).unwrap() <= 1e-6);
    }
}

#[test]
fn padding_does_not_change_emissions() {
    let f = fixture();
    for cfg in [
        config(ProcessingMode::ConditionallyIndependent, 16, 2),
        na_config(16, 2),
    ] {
        let m = random_model(&f, &cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let short = random_sequence(&f.manifest.layout, 1, 4, &mut rng);
        let long = random_sequence(&f.manifest.layout, 2, 12, &mut rng);
        let alone = collate_windows(&[&short], &[0..4]);
        let padded = collate_windows(&[&long, &short], &[0..12, 0..4]);
        let qa = transitions(&alone);
        let qp: Vec<Query> = transitions(&padded)
            .into_iter()
            .filter(|q| q.cell >= padded.event_cell(1, 0))
            .collect();
        let ea = m.emissions(&alone, &qa).unwrap();
        let ep = m.emissions(&padded, &qp).unwrap();
        assert!(max_abs_diff(&ea.tte, &ep.tte) < 1e-12);
        for (x, y) in ea.heads.iter().zip(&ep.heads) {
            assert!(max_abs_diff(x, y) < 1e-12);
        }
    }
}

#[test]
fn mean_loss_is_invariant_to_duplicating_sequences() {
    let f = fixture();
    let m = random_model(&f, &config(ProcessingMode::ConditionallyIndependent, 16, 1), 12);
    let one = seqs(&f, 1);
    let many = vec![one[0].clone(); 5];
    let a = evaluate_sequences(&m, &one).unwrap();
    let b = evaluate_sequences(&m, &many).unwrap();
    let (ma, mb) = (a.total / a.n_transitions as f64, b.total / b.n_transitions as f64);
    assert!((ma - mb).abs() < 1e-10 * ma.abs().max(1.0));
}

#[test]
fn untrained_event_type_head_is_uniform() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 16, 2),
        0,
    )
    .unwrap();
    let h = m.arch.head_index(EVENT_TYPE, HeadKind::Categorical).unwrap();
    assert_eq!(m.arch.heads[h].size, 3);
    let l = evaluate_sequences(&m, &seqs(&f, 20)).unwrap();
    let per = l.heads[h] / l.n_transitions as f64;
    assert!((per - 4f64.ln()).abs() < 1e-12, "{per}");
}

#[test]
fn tte_density_integrates_to_one() {
    let f = fixture();
    let m = random_model(&f, &config(ProcessingMode::ConditionallyIndependent, 16, 2), 13);
    let seq = seqs(&f, 1).remove(0);
    let batch = collate_windows(&[&seq], &[0..seq.n_events()]);
    let q = vec![Query {
        cell: batch.event_cell(0, 0),
        next: vec![],
        delta: None,
    }];
    let row = m.emissions(&batch, &q).unwrap().tte.row(0).to_vec();
    let k = m.arch.k;
    let lmax = row[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row[..k].iter().map(|l| (l - lmax).exp()).sum();
    let w: Vec<f64> = row[..k].iter().map(|l| (l - lmax).exp() / z).collect();
    let mu = row[k..2 * k].to_vec();
    let sd: Vec<f64> = row[2 * k..].iter().map(|s| s.clamp(-20.0, 10.0).exp()).collect();

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(1, 3 * k, row.clone()));
    for delta in [0.5, 30.0, 4000.0] {
        let nll = tape.tte_nll(x, k, &[(0, delta)]);
        let expected = -lognormal_mixture_log_pdf(delta, &w, &mu, &sd);
        assert!((tape.value(nll).data[0] - expected).abs() < 1e-9);
    }

    use rand_distr::{Distribution, Normal};
    let centre = mu.iter().zip(&w).map(|(m, w)| m * w).sum::<f64>();
    let spread =
        3.0 * sd.iter().copied().fold(1.0, f64::max) + mu.iter().map(|m| (m - centre).abs()).fold(0.0, f64::max);
    let proposal = Normal::new(centre, spread).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 1_000_000;
    let mut total = 0.0;
    for _ in 0..n {
        let y = proposal.sample(&mut rng);
        let x = y.exp();
        let log_q = -0.5 * ((y - centre) / spread).powi(2) - (spread * (2.0 * std::f64::consts::PI).sqrt()).ln() - y;
        total += (lognormal_mixture_log_pdf(x, &w, &mu, &sd) - log_q).exp();
    }
    let integral = total / n as f64;
    assert!((integral - 1.0).abs() < 1e-2, "{integral}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let f = fixture();
    let cfg = config(ProcessingMode::ConditionallyIndependent, 16, 1);
    let m = Model::new(&f.manifest.layout, &cfg, 0).unwrap();
    let init = m.params.clone();
    let mut t = Trainer::new(m, TrainOptions { batch_size: 8, seed: 1 });
    t.optimizer.lr = 0.0;
    for _ in 0..3 {
        t.train_step(&f.train).unwrap();
    }
    assert_eq!(t.model.params, init);
}

fn train(cfg: &ModelConfig, f: &common::Fixture, steps: usize) -> (Vec<f64>, Model) {
    let m = Model::new(&f.manifest.layout, cfg, 0).unwrap();
    let mut t = Trainer::new(
        m,
        TrainOptions {
            batch_size: 16,
            seed: 3,
        },
    );
    let losses = (0..steps).map(|_| t.train_step(&f.train).unwrap().loss).collect();
    (losses, t.model)
}

#[test]
fn training_reduces_loss_in_both_modes() {
    let f = fixture();
    for cfg in [
        config(ProcessingMode::ConditionallyIndependent, 16, 1),
        na_config(16, 1),
    ] {
        let before = evaluate_sequences(&Model::new(&f.manifest.layout, &cfg, 0).unwrap(), &f.tuning).unwrap();
        let (losses, m) = train(&cfg, &f, 200);
        let after = evaluate_sequences(&m, &f.tuning).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(after.total < before.total);
    }
}

#[test]
fn training_is_reproducible_per_seed() {
    let f = fixture();
    let cfg = config(ProcessingMode::ConditionallyIndependent, 8, 1);
    let (a, ma) = train(&cfg, &f, 5);
    let (b, mb) = train(&cfg, &f, 5);
    assert_eq!(a, b);
    assert_eq!(ma.params, mb.params);
}

#[test]
fn checkpoint_round_trip_and_dataset_check() {
    let f = fixture();
    let m = random_model(&f, &na_config(8, 1), 15);
    let hash = f.manifest.hash();
    let bytes = checkpoint::to_bytes(&m, &hash, 7, 15);
    let (back, header): (EventStreamModel<f64>, _) = checkpoint::from_bytes(&bytes, &f.manifest).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.config, m.config);
    assert_eq!(header.step, 7);

    let other = checkpoint::to_bytes(&m, "0000", 7, 15);
    assert!(checkpoint::from_bytes::<f64>(&other, &f.manifest).is_err());
    assert!(checkpoint::from_bytes::<f64>(&bytes[..bytes.len() - 8], &f.manifest).is_err());
}

#[test]
fn single_precision_tracks_double() {
    let f = fixture();
    let m = random_model(&f, &config(ProcessingMode::ConditionallyIndependent, 8, 1), 16);
    let m32 = EventStreamModel::<f32> {
        config: m.config.clone(),
        arch: m.arch.clone(),
        params: m.params.iter().map(|p| p.cast()).collect(),
    };
    let data = seqs(&f, 4);
    let a = evaluate_sequences(&m, &data).unwrap();
    let b = evaluate_sequences(&m32, &data).unwrap();
    assert!((a.total - b.total).abs() < 1e-3 * a.total.abs());
}
