mod common;

use std::sync::OnceLock;

use common::{brute_metrics, fast_train, report_vs_oracle, synth_setup, tiny_config, Setup};
use dscls::data::{read_predictions, write_predictions, PredictionRow, TaskSchema};
use dscls::engine::{self, Checkpoint, EngineError, OptimSnapshot, RunLog, Select, TrainConfig, TrainOutcome};
use dscls::optim::Schedule;

struct Overfit {
    setup: Setup,
    config: TrainConfig,
    outcome: TrainOutcome,
}

/// One 200-epoch run on the separable corpus, evaluated on its own training
/// set every epoch.
fn overfit() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let setup = synth_setup(TaskSchema::SubtaskB, 32, 1.0, 1);
        let config = TrainConfig {
            select: Select::Last,
            ..fast_train(200)
        };
        let outcome = engine::train(&setup.vocab, &setup.config, &setup.data, &setup.data, &config).unwrap();
        Overfit { setup, config, outcome }
    })
}

#[test]
fn separable_corpus_is_fit_exactly() {
    let o = overfit();
    let first = o.outcome.log.epochs.iter().find(|r| r.validation.accuracy == 1.0);
    assert!(first.is_some_and(|r| r.epoch <= 200));
    let report = engine::evaluate(&o.outcome.params, &o.setup.config, &o.setup.vocab, &o.setup.data, 32, 64).unwrap();
    assert_eq!(report.accuracy, 1.0);
    let log = &o.outcome.log;
    assert!(log.epochs.last().unwrap().mean_train_loss < log.epochs[0].mean_train_loss);
}

#[test]
fn overfit_model_is_confident_on_training_texts() {
    let o = overfit();
    let ckpt = Checkpoint {
        model: o.setup.config.clone(),
        train: o.config.clone(),
        task: TaskSchema::SubtaskB,
        vocab: o.setup.vocab.clone(),
        params: o.outcome.params.clone(),
        optim: None,
    };
    let texts: Vec<&str> = o.setup.data.iter().map(|e| e.text.as_str()).collect();
    for (p, e) in ckpt.predict(&texts).unwrap().iter().zip(&o.setup.data) {
        assert_eq!(p.label, TaskSchema::SubtaskB.label_name(e.label));
        assert!(p.confidence > 0.9, "confidence {}", p.confidence);
    }
}

#[test]
fn final_learning_rate_is_last_scheduled_value() {
    let o = overfit();
    let steps_per_epoch = 32u64.div_ceil(8);
    let total = steps_per_epoch * 200;
    let schedule = Schedule::with_warmup_fraction(total, 0.1);
    let last = o.outcome.log.epochs.last().unwrap();
    assert_eq!(last.lr_at_epoch_end, schedule.lr_at(o.config.base_lr, total - 1));
    assert_eq!(o.outcome.optim.step, total);
}

#[test]
fn no_signal_stays_near_chance() {
    let train = synth_setup(TaskSchema::SubtaskB, 200, 0.0, 2);
    let valid = dscls::data::synth_corpus(TaskSchema::SubtaskB, 200, 3, 0.0).unwrap();
    let out = engine::train(&train.vocab, &train.config, &train.data, &valid, &fast_train(8)).unwrap();
    for r in &out.log.epochs {
        assert!((r.validation.accuracy - 0.5).abs() <= 0.15, "epoch {}: {}", r.epoch, r.validation.accuracy);
    }
}

#[test]
fn identical_runs_give_identical_logs() {
    let s = synth_setup(TaskSchema::SubtaskC, 48, 0.7, 4);
    let cfg = fast_train(3);
    let a = engine::train(&s.vocab, &s.config, &s.data, &s.data, &cfg).unwrap();
    let b = engine::train(&s.vocab, &s.config, &s.data, &s.data, &cfg).unwrap();
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.params, b.params);
    let other = engine::train(&s.vocab, &s.config, &s.data, &s.data, &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.log.to_jsonl(), other.log.to_jsonl());
}

#[test]
fn best_epoch_maximizes_selection_metric() {
    let s = synth_setup(TaskSchema::SubtaskC, 60, 0.5, 5);
    let valid = dscls::data::synth_corpus(TaskSchema::SubtaskC, 30, 6, 0.5).unwrap();
    let out = engine::train(&s.vocab, &s.config, &s.data, &valid, &fast_train(6)).unwrap();
    let log: &RunLog = &out.log;
    let best = log.best().validation.weighted.f1;
    for r in &log.epochs {
        assert!(best >= r.validation.weighted.f1);
        if r.epoch < log.best_epoch {
            assert!(r.validation.weighted.f1 < best, "ties go to the earliest epoch");
        }
    }
    assert_eq!(log.epochs.iter().filter(|r| r.best).count(), 1);
    // Returned parameters are the best epoch's: re-evaluating reproduces it.
    let report = engine::evaluate(&out.params, &s.config, &s.vocab, &valid, 32, 64).unwrap();
    assert_eq!(report.ablation_values(), log.best().validation.ablation_values());
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let s = synth_setup(TaskSchema::SubtaskC, 48, 0.6, 7);
    let cfg = fast_train(2);
    let out = engine::train(&s.vocab, &s.config, &s.data, &s.data, &cfg).unwrap();
    let ckpt = Checkpoint {
        model: s.config.clone(),
        train: cfg.clone(),
        task: TaskSchema::SubtaskC,
        vocab: s.vocab.clone(),
        params: out.params.clone(),
        optim: Some(OptimSnapshot::from(&out.optim)),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    engine::save_checkpoint(&path, &ckpt).unwrap();
    let loaded = engine::load_checkpoint(&path).unwrap();
    assert_eq!(loaded.model, ckpt.model);
    assert_eq!(loaded.train, ckpt.train);
    assert_eq!(loaded.vocab, ckpt.vocab);
    assert_eq!(loaded.optim.as_ref().unwrap().step, out.optim.step);

    let before = ckpt.evaluate(&s.data).unwrap();
    let after = loaded.evaluate(&s.data).unwrap();
    for (a, b) in before.ablation_values().iter().zip(after.ablation_values()) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in ckpt.params.tensors().iter().zip(loaded.params.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }

    let mut other = s.config.clone();
    other.hidden = 16;
    let err = engine::load_checkpoint_expecting(&path, &other).unwrap_err();
    match err {
        EngineError::ShapeMismatch { name, .. } => assert_eq!(name, "token_embedding"),
        e => panic!("unexpected {e}"),
    }

    let bytes = std::fs::read(&path).unwrap();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    // Cut inside the first tensor's data.
    let cut = 16 + header_len + 4 + 4 + "token_embedding".len() + 4 + 16 + 10;
    std::fs::write(&path, &bytes[..cut]).unwrap();
    assert_eq!(
        engine::load_checkpoint(&path).unwrap_err().to_string(),
        "truncated tensor record 'token_embedding'"
    );
}

#[test]
fn evaluation_ignores_batch_size_and_matches_prediction_dump() {
    let s = synth_setup(TaskSchema::SubtaskC, 40, 0.5, 8);
    let params = dscls::model::init(&s.config, 3).unwrap();
    let r1 = engine::evaluate(&params, &s.config, &s.vocab, &s.data, 32, 1).unwrap();
    let r64 = engine::evaluate(&params, &s.config, &s.vocab, &s.data, 32, 64).unwrap();
    assert_eq!(r1, r64);

    let ckpt = Checkpoint {
        model: s.config.clone(),
        train: TrainConfig { max_len: 32, ..TrainConfig::default() },
        task: TaskSchema::SubtaskC,
        vocab: s.vocab.clone(),
        params,
        optim: None,
    };
    let texts: Vec<&str> = s.data.iter().map(|e| e.text.as_str()).collect();
    let rows: Vec<PredictionRow> = ckpt
        .predict(&texts)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(index, p)| PredictionRow { index, label: p.label, confidence: p.confidence })
        .collect();
    for r in &rows {
        assert!(r.confidence >= 1.0 / 3.0 && r.confidence <= 1.0);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    write_predictions(std::fs::File::create(&path).unwrap(), &rows).unwrap();
    let dumped = read_predictions(&path).unwrap();
    let preds: Vec<usize> = dumped
        .iter()
        .map(|r| TaskSchema::SubtaskC.parse_label(&r.label).unwrap())
        .collect();
    let labels: Vec<usize> = s.data.iter().map(|e| e.label).collect();
    let oracle = brute_metrics(&preds, &labels, 3);
    let report = ckpt.evaluate(&s.data).unwrap();
    assert!(report_vs_oracle(&report, &oracle) <= 1e-12);
}

#[test]
fn zero_output_layer_predicts_class_zero() {
    let s = synth_setup(TaskSchema::SubtaskB, 30, 0.5, 9);
    let mut params = dscls::model::init(&s.config, 0).unwrap();
    params.get_mut("classifier.weight").unwrap().data_mut().fill(0.0);
    params.get_mut("classifier.bias").unwrap().data_mut().fill(0.0);
    let report = engine::evaluate(&params, &s.config, &s.vocab, &s.data, 32, 8).unwrap();
    let prevalence = s.data.iter().filter(|e| e.label == 0).count() as f64 / s.data.len() as f64;
    assert_eq!(report.accuracy, prevalence);
}

#[test]
fn tiny_config_trains_both_head_modes() {
    for classes in [2, 3] {
        let task = if classes == 2 { TaskSchema::SubtaskB } else { TaskSchema::SubtaskC };
        let s = synth_setup(task, 24, 1.0, 10);
        assert_eq!(s.config, tiny_config(s.vocab.size(), classes));
        let out = engine::train(&s.vocab, &s.config, &s.data, &s.data, &fast_train(1)).unwrap();
        assert_eq!(out.log.epochs.len(), 1);
        assert!(out.log.epochs[0].mean_train_loss.is_finite());
    }
}
