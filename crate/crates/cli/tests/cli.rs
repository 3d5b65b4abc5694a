use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jitterlu::checkpoint::Checkpoint;
use jitterlu::config::ExperimentConfig;
use jitterlu::experiment::build_solver;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config() -> PathBuf {
    workspace_root().join("configs/toy.toml")
}

/// Runs the binary on the toy config shrunk to one seed and a few epochs.
fn jitterlu(out: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_jitterlu"));
    cmd.args(args)
        .arg("--config")
        .arg(toy_config())
        .arg("--set")
        .arg(format!("output_dir={}", out.display()))
        .args(["--set", "seeds=[0]", "--set", "scheme.epochs=2", "--set", "dataset.n_train=32"])
        .args(["--set", "dataset.n_test=8", "--set", "dataset.n_ood=8"])
        .args(["--set", "eval.worst_case.steps=5"]);
    for s in extra {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn ok(o: &Output) -> PathBuf {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

fn error_kind(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn shipped_configs_load_and_validate() {
    for name in ["toy.toml", "seismic.toml"] {
        let cfg = ExperimentConfig::load(&workspace_root().join("configs").join(name), &[]).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2], "{name}");
        assert_eq!(cfg.solver.k, 10, "{name}");
    }
    let toy = ExperimentConfig::load(&toy_config(), &[]).unwrap();
    let echo = toy.echo();
    assert_eq!(echo["dataset"]["noise_variance"], 0.01);
    assert_eq!(echo["eval"]["worst_case"]["epsilon"], 0.01);
    assert_eq!(echo["eval"]["worst_case"]["steps"], 50);
    assert_eq!(echo["operator"]["kind"], "identity");
}

#[test]
fn unknown_keys_fail_with_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = jitterlu(dir.path(), &["train", "--run-id", "r"], &["solver.bogus=1"]);
    assert_eq!(error_kind(&o), "config");
    let o = jitterlu(dir.path(), &["train", "--run-id", "r"], &["solver.eta=-1"]);
    assert_ne!(error_kind(&o), "");
}

#[test]
fn missing_datasets_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("nowhere");
    let o = jitterlu(
        dir.path(),
        &["train", "--run-id", "r", "--data", absent.to_str().unwrap()],
        &[],
    );
    assert_eq!(error_kind(&o), "missing_file");
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let run = ok(&jitterlu(dir.path(), &["train", "--run-id", "r"], &["scheme.epochs=0"]));
    let ckpt = Checkpoint::load(&run.join("seed0/model.ckpt")).unwrap();
    let cfg = ExperimentConfig::load(&toy_config(), &[]).unwrap();
    let init = build_solver(&cfg, 0).unwrap();
    assert_eq!(ckpt.params, init.net.params());
    assert!(ckpt.header.history.is_empty());
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |id: &'static str| ["train", "--evaluate", "--deterministic", "--run-id", id];
    let a = ok(&jitterlu(dir.path(), &args("a"), &[]));
    let b = ok(&jitterlu(dir.path(), &args("b"), &[]));
    for f in ["train.json", "config.json", "seed0/eval.json", "seed0/loss.csv", "seed0/model.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // evaluating the same checkpoint twice gives the same report
    let ckpt = a.join("seed0/model.ckpt");
    let ck = ckpt.to_str().unwrap();
    let e1 = ok(&jitterlu(dir.path(), &["eval", "--run-id", "e1", "--checkpoint", ck], &[]));
    let e2 = ok(&jitterlu(dir.path(), &["eval", "--run-id", "e2", "--checkpoint", ck], &[]));
    let r1 = std::fs::read(e1.join("eval.json")).unwrap();
    assert_eq!(r1, std::fs::read(e2.join("eval.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert!(report["worst_case"]["mean"].as_f64().unwrap() >= report["clean"]["mean"].as_f64().unwrap());
    // the same model evaluated inside training agrees with the standalone run
    assert_eq!(std::fs::read(a.join("seed0/eval.json")).unwrap(), r1);
}

#[test]
fn datagen_output_feeds_training_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = ok(&jitterlu(dir.path(), &["datagen", "--run-id", "d"], &[]));
    for f in ["train.bin", "test.bin", "ood.bin"] {
        assert!(data.join("seed0").join(f).exists());
    }
    let d = data.to_str().unwrap();
    let from_files = ok(&jitterlu(
        dir.path(),
        &["train", "--evaluate", "--deterministic", "--run-id", "f", "--data", d],
        &[],
    ));
    let fresh = ok(&jitterlu(dir.path(), &["train", "--evaluate", "--deterministic", "--run-id", "g"], &[]));
    assert_eq!(
        std::fs::read(from_files.join("seed0/model.ckpt")).unwrap(),
        std::fs::read(fresh.join("seed0/model.ckpt")).unwrap()
    );
    let out = dir.path().join("tables");
    let o = Command::new(env!("CARGO_BIN_EXE_jitterlu"))
        .args(["report", from_files.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&o);
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(out.join("scatter.csv").exists());
}

#[test]
fn attack_and_sweep_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let run = ok(&jitterlu(dir.path(), &["train", "--run-id", "t"], &[]));
    let ck = run.join("seed0/model.ckpt");
    let a = ok(&jitterlu(
        dir.path(),
        &["attack", "--run-id", "a", "--checkpoint", ck.to_str().unwrap()],
        &[],
    ));
    let csv = std::fs::read_to_string(a.join("attack.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("sample,clean_loss,attacked_loss,e_norm"));
    assert_eq!(csv.lines().count(), 9);
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert!(v[2] >= v[1] && v[3] <= 0.01 * (1.0 + 1e-12));
    }
    let s = ok(&jitterlu(dir.path(), &["sweep", "--run-id", "s", "--deterministic"], &[]));
    let sweep = std::fs::read_to_string(s.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("sigma,epsilon,risk,seed"));
    assert_eq!(sweep.lines().count(), 1 + 4);
}
