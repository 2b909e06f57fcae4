use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alignlab::config::RunConfig;

fn alignlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignlab"))
        .args(args)
        .env("ALIGNLAB_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn alignlab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_config(dir: &Path, data: &str) -> PathBuf {
    let mut cfg = RunConfig::toy();
    cfg.data.dir = dir.join(data);
    cfg.data.corpus.train_single = 24;
    cfg.data.corpus.train_replicated = 8;
    cfg.data.corpus.test_size = 8;
    let path = dir.join(format!("{data}.toml"));
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let out = alignlab(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--run-dir", "--schedule", "--paper-hparams"] {
        assert!(text.contains(flag), "train --help lacks {flag}");
    }
    let out = alignlab(&["prepare-data", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--force"));
}

#[test]
fn prepare_data_refuses_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "data");
    assert_eq!(code(&alignlab(&["prepare-data", "--config", s(&cfg)])), 0);
    let again = alignlab(&["prepare-data", "--config", s(&cfg)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    assert_eq!(code(&alignlab(&["prepare-data", "--config", s(&cfg), "--force"])), 0);
}

#[test]
fn same_seed_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (small_config(tmp.path(), "a"), small_config(tmp.path(), "b"));
    for cfg in [&a, &b] {
        assert_eq!(code(&alignlab(&["prepare-data", "--config", s(cfg), "--seed", "9"])), 0);
    }
    for split in ["train", "test_clean", "test_noisy", "test_accent"] {
        let read = |d: &str| fs::read(tmp.path().join(d).join("manifests").join(format!("{split}.tsv"))).unwrap();
        assert_eq!(read("a"), read("b"), "{split}");
    }
}

#[test]
fn bad_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[optim]\nlearning_rate = 0.1\n").unwrap();
    let out = alignlab(&["prepare-data", "--config", s(&path)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    let run = tmp.path().join("run");
    let out = alignlab(&["train", "--run-dir", s(&run), "--schedule", "sideways"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&alignlab(&["experiment", "bake-off", "--run-dir", s(&run)])), 2);
}

#[test]
fn train_decode_score_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "data");
    let run = tmp.path().join("staged");
    assert_eq!(code(&alignlab(&["prepare-data", "--config", s(&cfg)])), 0);

    let out = alignlab(&["train", "--config", s(&cfg), "--run-dir", s(&run), "--schedule", "staged"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("final checkpoint"));
    for f in ["config.toml", "build.txt", "train.log", "FINAL"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let out = alignlab(&["decode", "--run-dir", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let decodes = run.join("decodes").join("test_clean.tsv");
    assert!(decodes.is_file());

    let out = alignlab(&["score", "--run-dir", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(run.join("counts.tsv").is_file());

    let manifests = tmp.path().join("data").join("manifests");
    let out = alignlab(&["score", "--decodes", s(&decodes), "--manifest", s(&manifests.join("test_clean.tsv"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("CER "));
    let out = alignlab(&["score", "--decodes", s(&decodes), "--manifest", s(&manifests.join("train.tsv"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let report_dir = tmp.path().join("report");
    let out = alignlab(&["report", "--run-dir", s(&report_dir), s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let md = fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(md.contains("| test_clean |"), "{md}");
    assert!(md.contains("staged"), "{md}");
    assert!(report_dir.join("report.tsv").is_file());

    let again = alignlab(&["train", "--config", s(&cfg), "--run-dir", s(&run), "--seed", "2"]);
    assert_eq!(code(&again), 2, "{}", stderr(&again));
}

#[test]
fn shipped_toy_config_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join("toy.toml");
    let mut toy = RunConfig::toy();
    toy.resolve();
    assert_eq!(RunConfig::load(&path).unwrap(), toy);
}
