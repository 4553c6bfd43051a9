use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "data.phantom.volume_size=[16,16,16]",
    "--set",
    "data.phantom.lesion_radius_range=[2.5,3.5]",
    "--set",
    "network.base_width=2",
    "--set",
    "network.depth=2",
    "--set",
    "train.crop=[16,16,16]",
    "--set",
    "train.epochs=1",
    "--set",
    "train.cosine_decay_start_epoch=1",
];

fn digest(args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_digest"))
        .args(args)
        .args(extra)
        .env("RUST_LOG", "warn")
        .env("DIGEST_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_command_is_a_usage_error() {
    let out = digest(&["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_config_exits_one_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 3\nlr_initial = = 1\n").unwrap();
    let out = digest(
        &["--config", p(&cfg), "gen-data", "--out", p(&dir.path().join("d"))],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = digest(&["--set", "train.epoch=3", "gen-data", "--out", p(dir.path())], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(digest(
            &["gen-data", "--cases", "20", "--seed", "7", "--out", p(d)],
            TINY,
        ));
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 20 * 5 + 1);
    assert_eq!(fa, files(&b));
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("case_0019"));
}

#[test]
fn untrained_model_evaluates_to_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let t = dir.path().join("teacher");
    ok(digest(&["gen-data", "--cases", "6", "--out", p(&data)], TINY));
    ok(digest(
        &[
            "pretrain-teacher",
            "--data",
            p(&data),
            "--out",
            p(&t),
            "--set",
            "train.epochs=0",
        ],
        TINY,
    ));
    let eval = dir.path().join("eval");
    let stdout = ok(digest(
        &[
            "evaluate",
            "--data",
            p(&data),
            "--model",
            p(&t.join("teacher.ckpt")),
            "--out",
            p(&eval),
        ],
        TINY,
    ));
    assert!(stdout.contains("mean"));
    let csv = fs::read_to_string(eval.join("dice.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn pipeline_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (t, s, e) = (dir.path().join("t"), dir.path().join("s"), dir.path().join("e"));
    ok(digest(&["gen-data", "--cases", "6", "--out", p(&data)], TINY));
    ok(digest(&["pretrain-teacher", "--data", p(&data), "--out", p(&t)], TINY));
    for f in ["teacher.ckpt", "teacher_steps.jsonl", "teacher_epochs.jsonl"] {
        assert!(t.join(f).exists(), "{f}");
    }
    ok(digest(
        &[
            "train-student",
            "--data",
            p(&data),
            "--teacher",
            p(&t.join("teacher.ckpt")),
            "--out",
            p(&s),
        ],
        TINY,
    ));
    assert!(s.join("student.ckpt").exists());
    ok(digest(
        &[
            "evaluate",
            "--data",
            p(&data),
            "--model",
            p(&s.join("student.ckpt")),
            "--out",
            p(&e),
        ],
        TINY,
    ));
    let report = ok(digest(&["report", "--run", p(&e)], TINY));
    assert!(report.contains("FLAIR"));
}

#[test]
fn ablate_generates_data_and_reports_three_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablation");
    let stdout = ok(digest(
        &[
            "ablate",
            "--out",
            p(&out),
            "--set",
            "data.cases=6",
            "--set",
            "data.val_cases=1",
            "--set",
            "data.test_cases=2",
        ],
        TINY,
    ));
    assert!(stdout.contains("K_p + L_ds"));
    let ablation = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 4);
    assert!(out.join("data").join("manifest.json").exists());
}
