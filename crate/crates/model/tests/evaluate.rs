mod common;

use common::{config, fixture};
use evstream_core::config::{ProcessingMode, EVENT_TYPE};
use evstream_core::represent::SubjectSequence;
use evstream_core::task::{TaskRow, TaskSpec};
use evstream_model::evaluate::{
    eval_generative, finetune_head, parse_labeler, task_prompts, zero_shot, Constant, EvalError, LabelOutcome,
};
use evstream_model::train::{TrainOptions, Trainer};
use evstream_model::Model;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(seqs: &[SubjectSequence], label: impl Fn(&SubjectSequence) -> u8) -> Vec<TaskRow> {
    seqs.iter()
        .filter(|s| s.n_events() > 0)
        .map(|s| TaskRow {
            subject_id: s.subject_id,
            prompt_end_time: s.event_times[s.n_events() - 1],
            label: label(s),
        })
        .collect()
}

#[test]
fn empty_split_is_an_error() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 8, 1),
        0,
    )
    .unwrap();
    assert!(matches!(eval_generative(&m, &[]), Err(EvalError::EmptySplit)));
    let singles: Vec<_> = f.train.iter().map(|s| s.slice(0..s.n_events().min(1))).collect();
    assert!(matches!(eval_generative(&m, &singles), Err(EvalError::EmptySplit)));
}

#[test]
fn training_improves_held_out_metrics() {
    let f = fixture();
    let cfg = config(ProcessingMode::ConditionallyIndependent, 16, 1);
    let m = Model::new(&f.manifest.layout, &cfg, 0).unwrap();
    let before = eval_generative(&m, &f.tuning).unwrap();
    let et = before.heads.iter().find(|h| h.name == EVENT_TYPE).unwrap();
    assert!((et.nll - 4f64.ln()).abs() < 1e-9);
    let mut t = Trainer::new(
        m,
        TrainOptions {
            batch_size: 16,
            seed: 1,
        },
    );
    for _ in 0..200 {
        t.train_step(&f.train).unwrap();
    }
    let after = eval_generative(&t.model, &f.tuning).unwrap();
    assert!(after.total_nll < before.total_nll);
    assert!(after.tte_nll < before.tte_nll);
    let et = after.heads.iter().find(|h| h.name == EVENT_TYPE).unwrap();
    assert!(et.accuracy.unwrap() > 0.5);
    assert!(et.auroc.unwrap() > 0.5);
    let lv = after.heads.iter().find(|h| h.name == "lab_value").unwrap();
    assert!(lv.mse.unwrap().is_finite());
}

fn sex(f: &common::Fixture) -> impl Fn(&SubjectSequence) -> u8 + '_ {
    let first = f.manifest.layout.entry("sex").unwrap().offset + 1;
    move |s: &SubjectSequence| s.static_indices.contains(&first) as u8
}

#[test]
fn static_label_is_linearly_recoverable() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 16, 2),
        0,
    )
    .unwrap();
    let all: Vec<SubjectSequence> = f.train.iter().chain(&f.tuning).cloned().collect();
    let r = rows(&all, sex(&f));
    let prompts = task_prompts(&r, &all);
    let (train, eval) = prompts.split_at(prompts.len() / 2);
    let report = finetune_head(&m, train, eval).unwrap();
    assert!(report.auroc.unwrap() > 0.95, "{:?}", report.auroc);
}

#[test]
fn shuffled_labels_carry_no_signal() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 16, 2),
        0,
    )
    .unwrap();
    let all: Vec<SubjectSequence> = f.train.iter().chain(&f.tuning).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0.0;
    for _ in 0..5 {
        let mut r = rows(&all, sex(&f));
        let mut labels: Vec<u8> = r.iter().map(|x| x.label).collect();
        labels.shuffle(&mut rng);
        r.iter_mut().zip(labels).for_each(|(x, l)| x.label = l);
        let prompts = task_prompts(&r, &all);
        let (train, eval) = prompts.split_at(prompts.len() / 2);
        total += finetune_head(&m, train, eval).unwrap().auroc.unwrap();
    }
    assert!((total / 5.0 - 0.5).abs() < 0.1, "{}", total / 5.0);
}

#[test]
fn single_class_labels_are_degenerate() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 8, 1),
        0,
    )
    .unwrap();
    let prompts = task_prompts(&rows(&f.tuning, |_| 1), &f.tuning);
    assert!(matches!(
        finetune_head(&m, &prompts, &prompts),
        Err(EvalError::DegenerateLabels)
    ));
}

fn task(f: &common::Fixture, horizon: f64) -> TaskSpec {
    TaskSpec {
        name: "t".into(),
        horizon_minutes: horizon,
        rows: rows(&f.tuning, |s| (s.subject_id % 2) as u8),
    }
}

#[test]
fn constant_positive_labeler_gives_certainty() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 8, 1),
        0,
    )
    .unwrap();
    let t = task(&f, 1000.0);
    let prompts = task_prompts(&t.rows, &f.tuning);
    let r = zero_shot(
        &m,
        &f.manifest,
        &t,
        &prompts,
        &Constant(LabelOutcome::Positive),
        4,
        0,
        8,
    )
    .unwrap();
    assert!(r.rows.iter().all(|x| x.probability == Some(1.0)));
}

#[test]
fn single_sample_probabilities_are_binary_and_pool_counts() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 8, 1),
        0,
    )
    .unwrap();
    let t = task(&f, 5000.0);
    let prompts = task_prompts(&t.rows, &f.tuning);
    let l = parse_labeler("event:LAB").unwrap();
    let r = zero_shot(&m, &f.manifest, &t, &prompts, l.as_ref(), 1, 0, 10_000).unwrap();
    assert!(r
        .rows
        .iter()
        .all(|x| matches!(x.probability, Some(p) if p == 0.0 || p == 1.0)));
    let r = zero_shot(&m, &f.manifest, &t, &prompts, l.as_ref(), 6, 0, 10_000).unwrap();
    for x in &r.rows {
        assert_eq!(x.positives + x.negatives + x.abstains, 6);
        assert_eq!(
            x.probability,
            Some(x.positives as f64 / (x.positives + x.negatives) as f64)
        );
    }
}

#[test]
fn zero_shot_ignores_row_order_and_cohort_size() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 8, 1),
        0,
    )
    .unwrap();
    let t = task(&f, 5000.0);
    let prompts = task_prompts(&t.rows, &f.tuning);
    let l = parse_labeler("event:LAB").unwrap();
    let full = zero_shot(&m, &f.manifest, &t, &prompts, l.as_ref(), 3, 7, 10_000).unwrap();
    let mut reversed = prompts.clone();
    reversed.reverse();
    reversed.truncate(prompts.len() / 2);
    let part = zero_shot(&m, &f.manifest, &t, &reversed, l.as_ref(), 3, 7, 10_000).unwrap();
    for x in &part.rows {
        let y = full.rows.iter().find(|y| y.subject_id == x.subject_id).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn all_abstaining_cohort_is_an_error() {
    let f = fixture();
    let m = Model::new(
        &f.manifest.layout,
        &config(ProcessingMode::ConditionallyIndependent, 8, 1),
        0,
    )
    .unwrap();
    let t = task(&f, f64::INFINITY);
    let prompts = task_prompts(&t.rows, &f.tuning);
    let l = parse_labeler("event:dx:nothing").unwrap();
    assert!(matches!(
        zero_shot(&m, &f.manifest, &t, &prompts, l.as_ref(), 2, 0, 2),
        Err(EvalError::AllAbstain)
    ));
}
