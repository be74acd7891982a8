use std::path::Path;
use std::process::{Command, Output};

use pel_core::archive::Archive;
use pel_core::rng::RngStream;
use pel_core::tensor::{AnyTensor, Tensor};

fn pel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pel")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = pel(args);
    assert!(out.status.success(), "pel {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(pel(&["--version"]).status.code(), Some(0));
    assert_eq!(pel(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pel(&["audit-params", "--preset", "mnist-lt"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.pelt");
    let out = pel(&["eval", "--checkpoint", p(&missing), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.pelt"));

    let garbage = dir.path().join("garbage.pelt");
    std::fs::write(&garbage, b"not an archive").unwrap();
    assert_eq!(pel(&["eval", "--checkpoint", p(&garbage), "--data", p(&garbage)]).status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"lr": -1}"#).unwrap();
    let out = pel(&["train", "--config", p(&cfg), "--data", p(&missing), "--backbone", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn audit_accepts_an_explicit_config() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"classes": 1000, "peft": {"variant": "adaptformer"}}"#).unwrap();
    let v = ok(&["audit-params", "--config", p(&spec)]);
    assert_eq!(v["peft_closed_form"], 617_868);
    assert_eq!(v["agree"], true);
}

/// Semantic init finds its text archive next to the config file.
#[test]
fn semantic_init_resolves_text_features_beside_config() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("configs");
    std::fs::create_dir(&sub).unwrap();
    let data = dir.path().join("data.pelt");
    let backbone = dir.path().join("bb.pelt");
    ok(&["synth-data", "--classes", "4", "--n-max", "8", "--ratio", "2", "--image-size", "16", "--test-per-class", "2", "--out", p(&data)]);
    ok(&["init-backbone", "--out", p(&backbone)]);

    let mut text = Archive::new();
    let mut rng = RngStream::new(1);
    for c in 0..4 {
        let t: Tensor<f32> = rng.normal_tensor(&[32], 1.0);
        text.insert(format!("text_emb.{c}"), AnyTensor::F32(t));
    }
    text.insert_scalar_i64("meta.class_count", 4);
    text.save(sub.join("text.pelt")).unwrap();

    let cfg = sub.join("zs.json");
    std::fs::write(&cfg, r#"{"epochs": 0, "classifier": {"init": "semantic", "text_features": "text.pelt"}, "tte": {"enabled": false}}"#).unwrap();
    let out = dir.path().join("run");
    let v = ok(&["train", "--config", p(&cfg), "--data", p(&data), "--backbone", p(&backbone), "--out", p(&out)]);
    assert!(v["test"]["overall"].is_number());
    assert!(out.join("checkpoint.pelt").exists());

    // Without the path the run is a configuration error.
    std::fs::write(&cfg, r#"{"epochs": 0, "classifier": {"init": "semantic"}}"#).unwrap();
    let r = pel(&["train", "--config", p(&cfg), "--data", p(&data), "--backbone", p(&backbone), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));

    let report = dir.path().join("analysis");
    ok(&["report", "--checkpoint", p(&out.join("checkpoint.pelt")), "--data", p(&data), "--out", p(&report)]);
    assert!(report.join("analysis.json").exists());
}
