//! Drives the `wmcert` binary through a full small run.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[toy]
pretrain_steps = 150
classifier_samples = 64

[pilot]
steps = 20
record_every = 5

[embed]
steps = 200
learning_rate = 3e-2
doubling_period = 50

[verify]
m = 10
n = 10

[certify]
trials = 40
grid_size = 20

[attack]
replicates = 2
pgd_steps = 5
adversarial_steps = 10
"#;

fn wmcert(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.toml");
    if !config.exists() {
        std::fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_wmcert"))
        .arg("--run-dir")
        .arg(dir.join("run"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wmcert(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "1", "toy"]);
    ok(d, &["--seed", "1", "pilot"]);
    ok(d, &["--seed", "1", "allocate", "--pilot", "pilot.json"]);
    ok(d, &["--seed", "1", "embed"]);
    dir
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let dir = prepared();
    let d = dir.path();
    let v = ok(d, &["--seed", "2", "verify", "--suspect", "watermarked.ckpt", "--assert"]);
    assert!(v.contains("Watermarked"), "{v}");
    let c = ok(d, &["--seed", "2", "certify", "--suspect", "watermarked.ckpt"]);
    assert!(c.starts_with("Certified"), "{c}");
    for kind in ["random", "pgd", "quantize", "finetune", "sweep", "audit"] {
        ok(d, &["--seed", "2", "attack", kind, "--suspect", "watermarked.ckpt"]);
    }
    ok(d, &["plotdata", "attack_sweep.csv", "embed_log.csv", "attack_pgd.json", "pilot.json"]);
    let run = d.join("run");
    for f in ["certificate.json", "embed_log.csv", "plot_data.csv", "manifests/attack-finetune.json", "manifests/plotdata.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let cert: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("certificate.json")).unwrap()).unwrap();
    assert!(cert["r_star"].as_f64().unwrap() > 0.0);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifests/plotdata.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed_was_given"], false);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
}

#[test]
fn clean_suspect_fails_assert_and_replay_matches() {
    let dir = prepared();
    let d = dir.path();
    let out = wmcert(d, &["--seed", "3", "verify", "--suspect", "reference.ckpt", "--assert"]);
    assert_eq!(out.status.code(), Some(1));
    let manifest = d.join("run/manifests/embed.json");
    let replay = Command::new(env!("CARGO_BIN_EXE_wmcert")).arg("replay").arg(&manifest).output().unwrap();
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stdout));
    assert!(String::from_utf8_lossy(&replay.stdout).contains("2 of 2 outputs reproduced"));

    // A recorded digest that the re-executed run cannot reproduce.
    let mut edited: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    edited["outputs"][1]["sha256"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(&manifest, serde_json::to_vec(&edited).unwrap()).unwrap();
    let replay = Command::new(env!("CARGO_BIN_EXE_wmcert")).arg("replay").arg(&manifest).output().unwrap();
    assert_eq!(replay.status.code(), Some(1));
}

#[test]
fn configuration_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[verify]\nalpah = 0.1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wmcert"))
        .arg("--run-dir")
        .arg(d.join("run"))
        .arg("--config")
        .arg(d.join("bad.toml"))
        .arg("verify")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));

    let out = wmcert(d, &["certify", "--trials", "5", "--grid-size", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[certify]"));

    let out = wmcert(d, &["verify", "--suspect", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".wmcert.lock"), "1\n").unwrap();
    let out = wmcert(dir.path(), &["--seed", "1", "toy"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(!run.join("base.ckpt").exists());
}
