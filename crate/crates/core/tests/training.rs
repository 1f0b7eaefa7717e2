mod common;

use ced_core::model::PreparedStream;
use ced_core::numerics::{AdamConfig, AdamState};
use ced_core::trainer::{batch_gradients, evaluate, train, Split};
use ced_core::{CedError, CedModel, TrainConfig, Variant};

use common::{desk_config, refs, synthetic, toy_config};

#[test]
fn identical_seeds_give_identical_runs() {
    let data = synthetic(60, 1, 0.3, 40.0);
    let (tr, va) = data.split_at(48);
    let cfg = TrainConfig {
        epochs: 2,
        log_every: 3,
        batch_size: 8,
        ..toy_config(Variant::CedCnn, 3)
    };
    let a = train(&refs(tr), &refs(va), &cfg).unwrap();
    let b = train(&refs(tr), &refs(va), &cfg).unwrap();
    assert_eq!(a.checkpoint_bytes().unwrap(), b.checkpoint_bytes().unwrap());
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let c = train(&refs(tr), &refs(va), &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.checkpoint_bytes().unwrap(), c.checkpoint_bytes().unwrap());
}

#[test]
fn fixed_batch_loss_decreases() {
    let mut failures = 0;
    for seed in 0..5 {
        let data = synthetic(16, 100 + seed, 0.0, 40.0);
        let cfg = desk_config(Variant::Ced, seed);
        let mut model = CedModel::init(&cfg, &refs(&data)).unwrap();
        let prepared: Vec<PreparedStream> = data.iter().map(|s| model.prepare(s).unwrap()).collect();
        let batch: Vec<&PreparedStream> = prepared.iter().collect();
        let mut adam = AdamState::new(
            &model.params,
            AdamConfig {
                lr: cfg.learning_rate,
                ..AdamConfig::default()
            },
        );
        let mut losses = Vec::new();
        for _ in 0..6 {
            let (grads, loss) = batch_gradients(&model, &batch).unwrap();
            losses.push(loss);
            adam.step(&mut model.params, &grads).unwrap();
        }
        if !losses.windows(2).all(|w| w[1] < w[0]) {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} seeds without monotone decrease");
}

#[test]
fn batch_size_does_not_change_single_stream_gradient() {
    let data = synthetic(4, 9, 0.3, 40.0);
    let cfg = toy_config(Variant::CedCnn, 9);
    let model = CedModel::init(&cfg, &refs(&data)).unwrap();
    let p = model.prepare(&data[0]).unwrap();
    let (one, l1) = batch_gradients(&model, &[&p]).unwrap();
    let (many, l4) = batch_gradients(&model, &[&p, &p, &p, &p]).unwrap();
    assert_eq!(l1, l4);
    for id in model.params.ids() {
        let (a, b) = (one.get(id).unwrap().data(), many.get(id).unwrap().data());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1e-300), "{x} vs {y}");
        }
    }

    let single = [&data[0]];
    let val = [&data[1]];
    let run = |b: usize| {
        let cfg = TrainConfig {
            batch_size: b,
            epochs: 3,
            log_every: 1,
            ..cfg.clone()
        };
        train(&single, &val, &cfg).unwrap()
    };
    let (a, b) = (run(1), run(8));
    for id in a.model.params.ids() {
        assert_eq!(a.model.params.get(id), b.model.params.get(id));
    }
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let data = synthetic(60, 2, 0.3, 40.0);
    let (tr, rest) = data.split_at(40);
    let (va, te) = rest.split_at(8);
    for variant in [Variant::CedCnn, Variant::Ced, Variant::TfidfLin, Variant::CedOm] {
        let cfg = TrainConfig {
            epochs: 2,
            log_every: 2,
            batch_size: 8,
            ..toy_config(variant, 2)
        };
        let out = train(&refs(tr), &refs(va), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        out.model.save(&path, out.best_step).unwrap();
        let (loaded, step) = CedModel::load(&path).unwrap();
        assert_eq!(step, out.best_step);
        let (o1, m1) = evaluate(&out.model, &refs(te), 0.875).unwrap();
        let (o2, m2) = evaluate(&loaded, &refs(te), 0.875).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
        assert_eq!(loaded.to_checkpoint_bytes(step).unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let data = synthetic(10, 3, 0.3, 30.0);
    let model = CedModel::init(&toy_config(Variant::Ced, 3), &refs(&data)).unwrap();
    let bytes = model.to_checkpoint_bytes(0).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let swapped = text.replacen("\"alpha\":0.875", "\"alpha\":0.975", 1);
    assert_ne!(swapped, text);
    assert!(CedModel::from_checkpoint_bytes(swapped.as_bytes()).is_err());
    assert!(CedModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn separable_data_is_learned_quickly() {
    let data = synthetic(400, 5, 0.0, 40.0);
    let (tr, va) = data.split_at(360);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        log_every: 25,
        patience: 100,
        ..desk_config(Variant::Ced, 5)
    };
    let out = train(&refs(tr), &refs(va), &cfg).unwrap();
    let hit = out.log.split(Split::Train).find(|r| r.accuracy > 0.95).map(|r| r.step);
    assert!(matches!(hit, Some(s) if s <= 500), "train rows: {:?}", out.log.rows);
}

#[test]
fn indistinguishable_classes_stay_at_chance() {
    let data = synthetic(1300, 6, 1.0, 40.0);
    let (tr, rest) = data.split_at(600);
    let (va, te) = rest.split_at(100);
    let cfg = TrainConfig {
        epochs: 5,
        log_every: 20,
        ..desk_config(Variant::TfidfLin, 6)
    };
    let out = train(&refs(tr), &refs(va), &cfg).unwrap();
    let (_, m) = evaluate(&out.model, &refs(te), 0.875).unwrap();
    let half_width = 3.0 * (0.25f64 / te.len() as f64).sqrt();
    assert!(te.len() >= 500);
    assert!((m.accuracy - 0.5).abs() <= half_width, "accuracy {}", m.accuracy);
}

#[test]
fn best_checkpoint_has_best_validation_accuracy() {
    let data = synthetic(80, 7, 0.3, 40.0);
    let (tr, va) = data.split_at(60);
    let cfg = TrainConfig {
        epochs: 4,
        log_every: 2,
        batch_size: 8,
        ..toy_config(Variant::Ced, 7)
    };
    let out = train(&refs(tr), &refs(va), &cfg).unwrap();
    let val: Vec<_> = out.log.split(Split::Validation).collect();
    let best = val.iter().map(|r| r.accuracy).fold(f64::MIN, f64::max);
    let first_best = val.iter().find(|r| r.accuracy == best).unwrap();
    assert_eq!(out.best_step, first_best.step);
    assert_eq!(out.best_accuracy, best);
    assert!(out.log.rows.windows(2).all(|w| w[0].step <= w[1].step));
}

#[test]
fn patience_stops_training() {
    let data = synthetic(80, 8, 1.0, 30.0);
    let (tr, va) = data.split_at(60);
    let cfg = TrainConfig {
        epochs: 50,
        log_every: 1,
        batch_size: 8,
        patience: 2,
        ..toy_config(Variant::TfidfLin, 8)
    };
    let out = train(&refs(tr), &refs(va), &cfg).unwrap();
    assert!(out.stopped_early);
    assert!(out.steps < 50 * 8);
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let data = synthetic(40, 9, 0.3, 40.0);
    let (tr, va) = data.split_at(30);
    let cfg = TrainConfig {
        learning_rate: 1e308,
        epochs: 3,
        batch_size: 4,
        ..toy_config(Variant::Ced, 9)
    };
    match train(&refs(tr), &refs(va), &cfg) {
        Err(CedError::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
    }
}
