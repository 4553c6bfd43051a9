mod common;

use std::collections::HashSet;
use std::f64::consts::PI;

use common::{tiny_dataset, tiny_net, tiny_train};
use digest_core::network::Network;
use digest_core::training::{init_student, lr_schedule, pretrain_teacher, train_student, LogSink, Phase, TrainConfig};
use digest_core::DigestError;

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, &cfg).unwrap(), 1e-4);
    assert_eq!(lr_schedule(100, &cfg).unwrap(), 1e-4);
    // 0.5 (1 + cos(99π/100)) = sin²(π/200)
    let oracle = 1e-4 * (PI / 200.0).sin().powi(2);
    let last = lr_schedule(199, &cfg).unwrap();
    assert!((last - oracle).abs() < 1e-15, "{last} vs {oracle}");
    assert!((last - 2.47e-8).abs() < 0.01e-8);
    assert!(lr_schedule(200, &cfg).is_err());
}

#[test]
fn schedule_is_monotone_after_start() {
    let cfg = TrainConfig::default();
    let lrs: Vec<f64> = (0..200).map(|e| lr_schedule(e, &cfg).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lrs.iter().all(|&v| v > 0.0));
}

#[test]
fn zero_epochs_returns_initialisation() {
    let ds = tiny_dataset(2, 1, 0, 16);
    let out = pretrain_teacher(
        &ds,
        &tiny_net(),
        &tiny_train(Phase::Teacher, 0, 16),
        &mut LogSink::none(),
    )
    .unwrap();
    assert_eq!(out.best_epoch, None);
    assert!(out.steps.is_empty());
    assert_eq!(out.network.params(), Network::new(tiny_net()).unwrap().params());
}

#[test]
fn zero_step_student_matches_teacher_with_attention_bypassed() {
    let ds = tiny_dataset(2, 1, 0, 16);
    let teacher = pretrain_teacher(
        &ds,
        &tiny_net(),
        &tiny_train(Phase::Teacher, 2, 16),
        &mut LogSink::none(),
    )
    .unwrap()
    .network;
    let mut student = train_student(
        &ds,
        &teacher,
        &tiny_net().student(),
        &tiny_train(Phase::Student, 0, 16),
        &mut LogSink::none(),
    )
    .unwrap()
    .network;
    student.cbam_bypass = true;
    let x = ds.eval_samples(digest_core::data::Split::Val, [16; 3]).unwrap()[0]
        .input
        .clone();
    assert_eq!(student.forward(&x).unwrap(), teacher.forward(&x).unwrap());
}

#[test]
fn student_structure_mismatch_is_rejected() {
    let teacher = Network::new(tiny_net()).unwrap();
    let other = digest_core::network::NetworkConfig {
        depth: 3,
        ..tiny_net().student()
    };
    assert!(matches!(
        init_student(&teacher, &other, true),
        Err(DigestError::Structure(_))
    ));
}

#[test]
fn wrong_phase_is_a_config_error() {
    let ds = tiny_dataset(1, 0, 0, 16);
    let err = pretrain_teacher(
        &ds,
        &tiny_net(),
        &tiny_train(Phase::Student, 1, 16),
        &mut LogSink::none(),
    );
    assert!(matches!(err, Err(DigestError::Config(_))));
}

#[test]
fn teacher_is_frozen_and_runs_are_deterministic() {
    let ds = tiny_dataset(3, 1, 0, 16);
    let teacher = pretrain_teacher(
        &ds,
        &tiny_net(),
        &tiny_train(Phase::Teacher, 2, 16),
        &mut LogSink::none(),
    )
    .unwrap()
    .network;
    let before = teacher.params().clone();
    let cfg = tiny_train(Phase::Student, 3, 16);
    let a = train_student(&ds, &teacher, &tiny_net().student(), &cfg, &mut LogSink::none()).unwrap();
    assert_eq!(teacher.params(), &before);
    let b = train_student(&ds, &teacher, &tiny_net().student(), &cfg, &mut LogSink::none()).unwrap();
    assert_eq!(a.network.params(), b.network.params());
    assert_eq!(a.steps.len(), b.steps.len());
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(x.loss, y.loss);
        assert_eq!(x.mask, y.mask);
    }
}

#[test]
fn logs_are_json_lines() {
    let ds = tiny_dataset(2, 1, 0, 16);
    let (mut steps, mut epochs) = (Vec::new(), Vec::new());
    let mut sink = LogSink {
        steps: Some(&mut steps),
        epochs: Some(&mut epochs),
    };
    let out = pretrain_teacher(&ds, &tiny_net(), &tiny_train(Phase::Teacher, 2, 16), &mut sink).unwrap();
    let steps = String::from_utf8(steps).unwrap();
    let epochs = String::from_utf8(epochs).unwrap();
    assert_eq!(steps.lines().count(), 4);
    assert_eq!(epochs.lines().count(), 2);
    for line in steps.lines().chain(epochs.lines()) {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(out.best_epoch.is_some());
}

/// 1500 student iterations over a tiny network: every step has its own draw
/// and all 15 subsets appear.
#[test]
fn masks_are_fresh_and_cover_all_subsets() {
    let ds = tiny_dataset(50, 0, 0, 8);
    let teacher = Network::new(tiny_net()).unwrap();
    let cfg = tiny_train(Phase::Student, 30, 8);
    let out = train_student(&ds, &teacher, &tiny_net().student(), &cfg, &mut LogSink::none()).unwrap();
    assert_eq!(out.steps.len(), 1500);
    let masks: Vec<_> = out.steps.iter().map(|s| s.mask.unwrap()).collect();
    let distinct: HashSet<usize> = masks.iter().map(|m| m.code()).collect();
    assert_eq!(distinct.len(), 15);
    let repeats = masks.windows(2).filter(|w| w[0] == w[1]).count();
    // about 1/15 of consecutive pairs repeat under independent draws
    assert!(repeats < 200, "{repeats}");
}

#[test]
fn seg_only_student_logs_zero_weight_transfer() {
    let ds = tiny_dataset(2, 0, 0, 16);
    let teacher = Network::new(tiny_net()).unwrap();
    let cfg = TrainConfig {
        ds_weight: 0.0,
        ..tiny_train(Phase::Student, 1, 16)
    };
    let out = train_student(&ds, &teacher, &tiny_net().student(), &cfg, &mut LogSink::none()).unwrap();
    for s in &out.steps {
        let r = s.report.as_ref().unwrap();
        assert_eq!(r.l_total, r.l_seg);
        assert!(r.l_ds > 0.0);
    }
}

#[test]
fn transfer_loss_falls_during_student_training() {
    let ds = tiny_dataset(8, 1, 0, 16);
    let teacher = pretrain_teacher(
        &ds,
        &tiny_net(),
        &tiny_train(Phase::Teacher, 6, 16),
        &mut LogSink::none(),
    )
    .unwrap()
    .network;
    let cfg = TrainConfig {
        copy_init: false,
        ..tiny_train(Phase::Student, 6, 16)
    };
    let out = train_student(&ds, &teacher, &tiny_net().student(), &cfg, &mut LogSink::none()).unwrap();
    let l_ds: Vec<f64> = out.steps.iter().map(|s| s.report.as_ref().unwrap().l_ds).collect();
    let head = l_ds[..8].iter().sum::<f64>() / 8.0;
    let tail = l_ds[l_ds.len() - 8..].iter().sum::<f64>() / 8.0;
    assert!(tail < head, "first epoch {head}, last epoch {tail}");
}

#[test]
fn crop_larger_than_volume_fails_before_training() {
    let ds = tiny_dataset(1, 0, 0, 16);
    let err = pretrain_teacher(
        &ds,
        &tiny_net(),
        &tiny_train(Phase::Teacher, 1, 24),
        &mut LogSink::none(),
    );
    assert!(matches!(err, Err(DigestError::Shape(_))));
}
