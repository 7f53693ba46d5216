use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pokerlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pokerlab")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A run configuration with a small model and short training.
fn small_config(dir: &Path) -> String {
    let cfg = json!({
        "generation": {"rollouts": 40},
        "model": {"layers": 2, "heads": 2, "model_dim": 16, "mlp_dim": 32, "context_len": 256, "vocab_size": 80, "seed": 0},
        "training": {"epochs": 2, "batch_size": 16, "grad_accum": 1, "optimizer": {"lr": 3e-3, "beta1": 0.9, "beta2": 0.95, "eps": 1e-8, "weight_decay": 0.01}},
        "probe": {"hyper": {"hidden": 16, "max_epochs": 20}}
    });
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn generate(dir: &Path, cfg: &str, name: &str, hands: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    ok(&pokerlab(&["--config", cfg, "--seed", "5", "--out", path(&out), "generate", "--hands", hands]));
    out
}

#[test]
fn generation_is_deterministic_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = generate(dir.path(), &cfg, "a", "40");
    let b = generate(dir.path(), &cfg, "b", "40");
    for f in ["train.phh", "test.phh", "styles.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["train_hands"], 38);
    assert_eq!(m["test_hands"], 2);
    assert_eq!(m["seed"], 5);
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pokerlab(&["nonsense"]).status.code(), Some(2));
    assert_eq!(pokerlab(&["train"]).status.code(), Some(2));
    let missing = dir.path().join("nowhere");
    let out = pokerlab(&["--out", path(&dir.path().join("m")), "train", "--corpus", path(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a corpus directory"));
}

#[test]
fn train_probe_and_project_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let corpus = generate(dir.path(), &cfg, "corpus", "400");
    let model = dir.path().join("model");
    let stdout = ok(&pokerlab(&["--config", &cfg, "--out", path(&model), "train", "--corpus", path(&corpus)]));
    assert!(stdout.contains("step 0 val_loss"));
    let log = fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,train_loss,val_loss,lr\n"));
    let ckpt = model.join("best.bin");
    assert!(ckpt.exists() && model.join("last.bin").exists() && model.join("vocab.json").exists());

    // Resuming a finished run with more epochs continues the same log.
    let first_rows = log.lines().count();
    ok(&pokerlab(&[
        "--config",
        &cfg,
        "--out",
        path(&model),
        "train",
        "--corpus",
        path(&corpus),
        "--epochs",
        "3",
        "--resume",
    ]));
    let resumed = fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert!(resumed.starts_with(&log) && resumed.lines().count() > first_rows);

    let probe = dir.path().join("probe");
    let common = ["--config", &cfg, "--out", path(&probe)];
    let args =
        ["probe", "--corpus", path(&corpus), "--checkpoint", path(&ckpt), "--layers", "0..2", "--probe-seeds", "3"];
    let stdout = ok(&pokerlab(&[&common[..], &args[..]].concat()));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("layer ")).count(), 4);
    assert!(stdout.contains('±'));
    let curves = fs::read_to_string(probe.join("layer_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 4);
    assert!(probe.join("confusion_layer1_mlp.csv").exists() && probe.join("report.json").exists());

    let eq = dir.path().join("equity");
    let args = [
        "probe",
        "--corpus",
        path(&corpus),
        "--checkpoint",
        path(&ckpt),
        "--task",
        "equity",
        "--rollouts",
        "100",
        "--probe-seeds",
        "2",
        "--layers",
        "0,1",
    ];
    ok(&pokerlab(&[&["--config", &cfg, "--out", path(&eq)][..], &args[..]].concat()));
    let report: Value = serde_json::from_str(&fs::read_to_string(eq.join("report.json")).unwrap()).unwrap();
    let first = &report["layers"][0];
    assert!(first["pearson_r"]["mean"].is_number() && first["r2"]["mean"].is_number() && first["accuracy"].is_null());

    let pca = dir.path().join("pca");
    let args = ["project", "--corpus", path(&corpus), "--checkpoint", path(&ckpt), "--layers", "0,1"];
    ok(&pokerlab(&[&["--config", &cfg, "--out", path(&pca)][..], &args[..]].concat()));
    for l in 0..2 {
        let text = fs::read_to_string(pca.join(format!("projection_layer{l}.jsonl"))).unwrap();
        let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header["layer"], l);
        assert!(text.lines().count() > 3);
    }

    let bad = pokerlab(&[
        "--config",
        &cfg,
        "--out",
        path(&probe),
        "probe",
        "--corpus",
        path(&corpus),
        "--checkpoint",
        path(&ckpt),
        "--task",
        "colour",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = pokerlab(&[
        "--config",
        &cfg,
        "--out",
        path(&probe),
        "probe",
        "--corpus",
        path(&corpus),
        "--checkpoint",
        path(&ckpt),
        "--layers",
        "5",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn belief_check_passes_and_rejects_bad_instances() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("belief");
    let stdout = ok(&pokerlab(&["--out", path(&out), "belief-check", "--max-history", "4", "--horizon", "2"]));
    assert!(stdout.contains("PASS"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("belief_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_linearity_error"].as_f64().unwrap() < 1e-9);

    let bad = json!({
        "states": 2, "observations": 2, "actions": 1,
        "transition": [[[0.5, 0.6], [0.5, 0.5]]],
        "observation": [[1.0, 0.0], [0.0, 1.0]],
        "policy": [1.0],
        "initial": [0.5, 0.5]
    });
    let p = dir.path().join("bad.json");
    fs::write(&p, bad.to_string()).unwrap();
    let res = pokerlab(&["--out", path(&out), "belief-check", "--pomdp", path(&p)]);
    assert_eq!(res.status.code(), Some(1));
}
