mod common;

use common::{tiny_dataset, tiny_net};
use digest_core::config::{ExperimentConfig, PhaseOverrides, Scale};
use digest_core::evaluation::DiceTable;
use digest_core::network::checkpoint;
use digest_core::network::Network;
use digest_core::pipeline::{run_ablation, run_evaluation, teacher_path, ABLATION_LABELS};

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Scale::Desk).with_seed(2);
    cfg.network = tiny_net();
    cfg.train.crop = [16; 3];
    cfg.train.epochs = 2;
    cfg.train.cosine_decay_start_epoch = 1;
    cfg.student = PhaseOverrides {
        epochs: Some(1),
        cosine_decay_start_epoch: Some(1),
        ..PhaseOverrides::default()
    };
    cfg
}

#[test]
fn ablation_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(3, 1, 2, 16);
    let entries = run_ablation(&ds, &tiny_config(), None, true, Some(dir.path())).unwrap();
    let labels: Vec<&str> = entries.iter().map(|e| e.label.as_str()).collect();
    assert_eq!(labels, ABLATION_LABELS);
    let root = dir.path();
    let teacher = checkpoint::load(&teacher_path(&root.join("teacher"))).unwrap();
    assert_eq!(teacher.metadata["phase"], "teacher");
    for sub in ["kp", "kp_lds"] {
        assert!(root.join(sub).join("student.ckpt").exists());
        let steps = std::fs::read_to_string(root.join(sub).join("student_steps.jsonl")).unwrap();
        assert_eq!(steps.lines().count(), 3);
    }
    for sub in ["no_kp", "kp", "kp_lds"] {
        let csv = std::fs::read_to_string(root.join(sub).join("dice.csv")).unwrap();
        DiceTable::parse_csv(&csv).unwrap();
    }
    let ablation = std::fs::read_to_string(root.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 4);
    let top = DiceTable::parse_csv(&std::fs::read_to_string(root.join("dice.csv")).unwrap()).unwrap();
    assert_eq!(top, entries[2].table.rounded());
}

#[test]
fn student_phase_override_applies() {
    let cfg = tiny_config();
    assert_eq!(cfg.phase(digest_core::training::Phase::Student).epochs, 1);
    assert_eq!(cfg.phase(digest_core::training::Phase::Teacher).epochs, 2);
}

#[test]
fn sliding_window_evaluation_covers_every_subset() {
    let ds = tiny_dataset(0, 0, 2, 16);
    let mut cfg = tiny_config();
    cfg.train.crop = [8; 3];
    cfg.eval.sliding_window = true;
    let net = Network::new(cfg.network.clone()).unwrap();
    let table = run_evaluation(&ds, &net, &cfg, true, None).unwrap();
    assert_eq!(table.rows.len(), 15);
    assert!(table.mean.iter().all(|v| (0.0..=1.0).contains(v)));
}
