//! Drives the `pvm` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pvm_cli::metrics::{payloads, read_metrics};

fn pvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvm")).args(args).env_remove("PVM_OUT_DIR").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const DEPTH_SMOKE: &str = r#"
task = "depth"
variants = ["pvm"]
seeds = [0]
epochs = 3
batch_size = 8
[data]
train = 200
test = 20
[optimizer]
lr = 0.003
[depth]
features = 4
dim = 16
rpssb_blocks = 1
"#;

const CLS_TINY: &str = r#"
task = "cls"
seeds = [0]
epochs = 1
batch_size = 8
[data]
train = 40
test = 20
[cls]
image_size = 16
dim = 8
expand = 1
classes = 4
"#;

#[test]
fn verify_reports_suites_and_rejects_unknown_names() {
    let o = pvm(&["verify", "--suite", "mask-oracle"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1000/1000 exact"));
    let o = pvm(&["verify", "--suite", "agnosticism"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("vm_forward: FAILS agnosticism"));
    let o = pvm(&["verify", "--suite", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mask-oracle, agnosticism, all-valid, gradcheck, fill"));
}

#[test]
fn maskgen_writes_identical_files_for_identical_flags() {
    let dir = tempfile::tempdir().unwrap();
    let mut fractions = Vec::new();
    for stem in ["a", "b"] {
        let out = dir.path().join(stem);
        let o = pvm(&["maskgen", "--regime", "hard", "--size", "256", "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        let f: f64 = stdout(&o).trim().strip_prefix("invalid fraction ").unwrap().parse().unwrap();
        assert!((0.5..0.75).contains(&f));
        fractions.push(f);
    }
    assert_eq!(fractions[0], fractions[1]);
    for ext in ["pvmt", "pgm"] {
        assert_eq!(fs::read(dir.path().join(format!("a.{ext}"))).unwrap(), fs::read(dir.path().join(format!("b.{ext}"))).unwrap());
    }
    assert!(!pvm(&["maskgen", "--density", "0", "--size", "8", "--out", dir.path().join("c").to_str().unwrap()]).status.success());
}

#[test]
fn depth_smoke_run_lowers_the_loss_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "depth.toml", DEPTH_SMOKE);
    let out = dir.path().join("runs");
    let o = pvm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_metrics(out.join("metrics-depth-pvm.jsonl")).unwrap();
    let losses: Vec<f64> = records.iter().filter(|r| r.metric == "charbonnier").map(|r| r.value).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(records.iter().any(|r| r.split == "test" && r.metric == "rmse"));
    assert!(out.join("depth-pvm-learned-s0/checkpoint/manifest.txt").is_file());
}

#[test]
fn cls_train_then_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cls.toml", CLS_TINY);
    let mut runs = Vec::new();
    for name in ["one", "two"] {
        let out = dir.path().join(name);
        let o = pvm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for v in ["pvm", "vm"] {
            assert!(out.join(format!("metrics-cls-{v}.jsonl")).is_file());
        }
        let ckpt = out.join("cls-pvm-learned-s0/checkpoint");
        let o = pvm(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let records = read_metrics(out.join("metrics-cls-pvm.jsonl")).unwrap();
        for regime in ["easy", "hard", "extreme"] {
            assert!(records.iter().any(|r| r.split == regime && r.metric == "top1"), "{regime}");
        }
        runs.push(payloads(&records));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn eval_refuses_missing_or_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cls.toml", CLS_TINY);
    let out = dir.path().join("runs");
    let o = pvm(&["eval", "--config", &cfg, "--checkpoint", dir.path().join("none").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    assert!(pvm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let other = write_config(dir.path(), "other.toml", &CLS_TINY.replace("dim = 8", "dim = 12"));
    let ckpt = out.join("cls-vm-learned-s0/checkpoint");
    let o = pvm(&["eval", "--config", &other, "--checkpoint", ckpt.to_str().unwrap(), "--regime", "easy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config hash mismatch"));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "task = \"cls\"\nwidth = 3\n");
    let o = pvm(&["train", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid config"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            pvm_cli::config::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e:#}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
