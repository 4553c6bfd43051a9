//! End-to-end runs: pretraining, student training, evaluation and the
//! component ablation, with their files under one output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::evaluation::{emit_report, evaluate_subsets, AblationEntry, DiceTable, SlidingWindow};
use crate::network::{checkpoint, Network};
use crate::training::{pretrain_teacher, train_student, LogSink, Phase, TrainOutcome};
use crate::{DigestError, Result};

/// Environment switch for deterministic mode (`1`/`true`).
pub const DETERMINISTIC_ENV: &str = "DIGEST_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV)
        .map(|v| matches!(v.trim(), "1" | "true" | "yes" | "on"))
        .unwrap_or(false)
}

/// Student variants of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudentVariant {
    pub copy_init: bool,
    pub ds_loss: bool,
}

impl StudentVariant {
    pub const FULL: StudentVariant = StudentVariant {
        copy_init: true,
        ds_loss: true,
    };
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DigestError::io(dir, e))
}

fn metadata(outcome: &TrainOutcome, phase: Phase, cfg: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    m.insert("phase".into(), format!("{phase:?}").to_lowercase());
    m.insert(
        "best_epoch".into(),
        outcome.best_epoch.map_or("none".into(), |e| e.to_string()),
    );
    m.insert("best_val".into(), outcome.best_val.to_string());
    m.insert(
        "train".into(),
        serde_json::to_string(&cfg.phase(phase)).map_err(|e| DigestError::Format(e.to_string()))?,
    );
    Ok(m)
}

fn with_logs<T>(out: Option<&Path>, prefix: &str, f: impl FnOnce(&mut LogSink) -> Result<T>) -> Result<T> {
    match out {
        None => f(&mut LogSink::none()),
        Some(dir) => {
            create_dir(dir)?;
            let open = |name: String| -> Result<BufWriter<File>> {
                let p = dir.join(name);
                Ok(BufWriter::new(File::create(&p).map_err(|e| DigestError::io(&p, e))?))
            };
            let mut steps = open(format!("{prefix}_steps.jsonl"))?;
            let mut epochs = open(format!("{prefix}_epochs.jsonl"))?;
            let mut sink = LogSink {
                steps: Some(&mut steps),
                epochs: Some(&mut epochs),
            };
            f(&mut sink)
        }
    }
}

pub fn teacher_path(out: &Path) -> PathBuf {
    out.join("teacher.ckpt")
}

pub fn student_path(out: &Path) -> PathBuf {
    out.join("student.ckpt")
}

/// Pretrains the teacher; with `out`, writes `teacher.ckpt` and logs there.
pub fn run_teacher(dataset: &Dataset, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let train = cfg.phase(Phase::Teacher);
    let outcome = with_logs(out, "teacher", |sink| {
        pretrain_teacher(dataset, &cfg.network.teacher(), &train, sink)
    })?;
    if let Some(dir) = out {
        checkpoint::save(
            &teacher_path(dir),
            &outcome.network,
            &metadata(&outcome, Phase::Teacher, cfg)?,
        )?;
    }
    Ok(outcome)
}

/// Trains one student variant; with `out`, writes `student.ckpt` and logs.
pub fn run_student(
    dataset: &Dataset,
    teacher: &Network,
    cfg: &ExperimentConfig,
    variant: StudentVariant,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut train = cfg.phase(Phase::Student);
    train.copy_init = train.copy_init && variant.copy_init;
    if !variant.ds_loss {
        train.ds_weight = 0.0;
    }
    let outcome = with_logs(out, "student", |sink| {
        train_student(dataset, teacher, &cfg.network.student(), &train, sink)
    })?;
    if let Some(dir) = out {
        checkpoint::save(
            &student_path(dir),
            &outcome.network,
            &metadata(&outcome, Phase::Student, cfg)?,
        )?;
    }
    Ok(outcome)
}

/// Evaluates on the test split over all 15 subsets; with `out`, writes the
/// report files.
pub fn run_evaluation(
    dataset: &Dataset,
    model: &Network,
    cfg: &ExperimentConfig,
    deterministic: bool,
    out: Option<&Path>,
) -> Result<DiceTable> {
    let crop = cfg.train.crop;
    let table = if cfg.eval.sliding_window {
        let samples = dataset.full_samples(Split::Test, crop)?;
        evaluate_subsets(
            &SlidingWindow::new(model, crop, cfg.eval.overlap)?,
            &samples,
            !deterministic,
        )?
    } else {
        evaluate_subsets(model, &dataset.eval_samples(Split::Test, crop)?, !deterministic)?
    };
    if let Some(dir) = out {
        emit_report(&table, None, dir)?;
    }
    Ok(table)
}

pub const ABLATION_LABELS: [&str; 3] = ["no K_p, no L_ds", "K_p only", "K_p + L_ds"];

/// The three ablation configurations: the complete-input teacher evaluated
/// on masked inputs, a copy-initialised student trained on masked inputs
/// with Dice only, and the same student with the stage-wise transfer loss.
///
/// An existing `teacher` is reused; otherwise one is pretrained.
pub fn run_ablation(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    teacher: Option<Network>,
    deterministic: bool,
    out: Option<&Path>,
) -> Result<Vec<AblationEntry>> {
    let teacher = match teacher {
        Some(t) => t,
        None => run_teacher(dataset, cfg, out.map(|d| d.join("teacher")).as_deref())?.network,
    };
    let mut entries = Vec::new();
    let eval = |net: &Network, sub: &str| {
        run_evaluation(dataset, net, cfg, deterministic, out.map(|d| d.join(sub)).as_deref())
    };
    let base = eval(&teacher, "no_kp")?;
    info!("ablation {}: mean WT {:.4}", ABLATION_LABELS[0], base.mean[2]);
    entries.push(AblationEntry {
        label: ABLATION_LABELS[0].into(),
        transfer: false,
        ds_loss: false,
        table: base,
    });
    for (label, sub, ds_loss) in [(ABLATION_LABELS[1], "kp", false), (ABLATION_LABELS[2], "kp_lds", true)] {
        let variant = StudentVariant {
            copy_init: true,
            ds_loss,
        };
        let student = run_student(dataset, &teacher, cfg, variant, out.map(|d| d.join(sub)).as_deref())?.network;
        let table = eval(&student, sub)?;
        info!("ablation {label}: mean WT {:.4}", table.mean[2]);
        entries.push(AblationEntry {
            label: label.into(),
            transfer: true,
            ds_loss,
            table,
        });
    }
    if let Some(dir) = out {
        emit_report(&entries[2].table, Some(&entries), dir)?;
    }
    Ok(entries)
}
