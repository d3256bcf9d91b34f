use std::path::Path;
use std::process::{Command, Output};

use pointmbf::eval::RunReport;

fn pmbf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmbf")).args(args).current_dir(dir).output().expect("run pmbf")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_register_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pmbf(&["synth", "--seed", "2", "--count", "2", "--width", "32", "--height", "32", "--out", "pairs"], d));
    for f in ["src_color.png", "src_depth.png", "tgt_color.png", "tgt_depth.png", "intrinsics.json", "gt_pose.txt"] {
        assert!(d.join("pairs/pair_001").join(f).exists(), "{f}");
    }
    ok(&pmbf(&["register", "--pairs", "pairs", "--k", "50", "--out", "run.json"], d));
    let report = RunReport::read(&d.join("run.json")).unwrap();
    assert_eq!(report.pairs.len(), 2);
    assert!(report.aggregate.is_some());
    assert!(d.join("run.csv").exists());

    let out = pmbf(&["eval", "--report", "run.json"], d);
    ok(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("rotation") && table.contains("@5deg"), "{table}");
}

#[test]
fn eval_rejects_tampered_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pmbf(&["synth", "--seed", "3", "--count", "1", "--width", "32", "--height", "32", "--out", "pairs"], d));
    ok(&pmbf(&["register", "--pairs", "pairs", "--k", "50", "--out", "run.json"], d));
    let mut report = RunReport::read(&d.join("run.json")).unwrap();
    report.aggregate.as_mut().unwrap().rotation_deg.mean += 1.0;
    report.write(&d.join("bad.json")).unwrap();
    let out = pmbf(&["eval", "--report", "bad.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn train_writes_weights_and_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pmbf(&["synth", "--seed", "4", "--count", "1", "--width", "32", "--height", "32", "--out", "pairs"], d));
    std::fs::write(d.join("cfg.json"), r#"{"train": {"k": 20, "ransac_l": 10}}"#).unwrap();
    ok(&pmbf(
        &["--config", "cfg.json", "train", "--pairs", "pairs", "--epochs", "2", "--lr", "0.1", "--out", "w.pmbf"],
        d,
    ));
    assert!(d.join("w.pmbf").exists());
    let csv = std::fs::read_to_string(d.join("w.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    ok(&pmbf(&["register", "--pairs", "pairs", "--weights", "w.pmbf", "--k", "50", "--out", "run.json"], d));
}

#[test]
fn gradcheck_single_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = pmbf(&["gradcheck", "--op", "linear", "--seeds", "3"], dir.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let bad = pmbf(&["gradcheck", "--op", "no_such_op"], dir.path());
    assert!(!bad.status.success());
}

#[test]
fn failures_exit_nonzero_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = pmbf(&["register", "--pairs", "nowhere", "--out", "r.json"], d);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    std::fs::write(d.join("cfg.json"), r#"{"bogus": 1}"#).unwrap();
    let cfg = pmbf(&["--config", "cfg.json", "synth", "--out", "p"], d);
    assert!(!cfg.status.success());

    let neg = pmbf(&["synth", "--difficulty", "-1", "--out", "p"], d);
    assert!(!neg.status.success());

    std::fs::write(d.join("junk.pmbf"), b"not weights").unwrap();
    ok(&pmbf(&["synth", "--count", "1", "--width", "32", "--height", "32", "--out", "pairs"], d));
    let junk = pmbf(&["register", "--pairs", "pairs", "--weights", "junk.pmbf", "--out", "r.json"], d);
    assert!(!junk.status.success());
}
