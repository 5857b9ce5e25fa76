//! End-to-end exercises of the command-line binary: dataset generation,
//! a one-step training run, evaluation of its detections, and the
//! gradient-check exit-code contract.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tinydet"))
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let status = bin()
        .args(["gen-data", "--images", "8", "--seed", "3", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(data.join("gt.json").is_file());
    assert!(data.join("img_00000.pgm").is_file());

    let status = bin()
        .args(["train-toy", "--epochs", "1", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in ["history.json", "weights.bin", "weights.manifest.json", "detections.json"] {
        assert!(run.join(artifact).is_file(), "missing {artifact}");
    }

    let output = bin()
        .args(["eval", "--protocol", "both", "--gt"])
        .arg(data.join("gt.json"))
        .arg("--dets")
        .arg(run.join("detections.json"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(report["iou"]["map50"].is_number());
    assert!(report["safit"]["map50"].is_number());
    assert_eq!(report["num_gt"].as_u64().unwrap() > 0, true);
}

#[test]
fn gradcheck_losses_module_exits_zero() {
    let output = bin()
        .args(["gradcheck", "--module", "losses"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
}

#[test]
fn eval_rejects_unknown_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    std::fs::write(&gt, r#"{"images":[],"annotations":[],"categories":[]}"#).unwrap();
    let dets = dir.path().join("dets.json");
    std::fs::write(&dets, "[]").unwrap();
    let status = bin()
        .args(["eval", "--protocol", "bogus", "--gt"])
        .arg(&gt)
        .arg("--dets")
        .arg(&dets)
        .status()
        .unwrap();
    assert!(!status.success());
}
