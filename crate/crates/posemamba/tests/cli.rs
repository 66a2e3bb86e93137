use std::path::Path;
use std::process::{Command, Output};

const TRAIN_TOML: &str = r#"
epochs = 2
batch_size = 4
seed = 4
log_every = 1
[model]
depth = 1
d_model = 8
frames = 6
joints = 17
state_size = 4
[data]
validation_fraction = 0.25
[data.synthetic]
sequence_count = 8
frames = 10
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posemamba"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every non-table log line is `key=value` pairs.
fn assert_key_value(text: &str) {
    for line in text.lines().filter(|l| l.starts_with("event=")) {
        for pair in line.split(' ').filter(|p| !p.is_empty()) {
            assert!(pair.contains('='), "not key=value: {pair:?} in {line:?}");
        }
    }
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("train.toml"), TRAIN_TOML).unwrap();

    let t = run(d, &["--config", "train.toml", "--out", "ck", "train"]);
    assert!(t.status.success(), "{}", stdout(&t));
    let log = stdout(&t);
    assert_key_value(&log);
    assert!(log.contains("event=checkpoint_verified"));
    assert!(log.contains("val_mpjpe_mm="));
    assert!(d.join("ck/final.pmck").exists());

    let s = run(d, &["--config", "train.toml", "--out", "data.jsonl", "synth"]);
    assert!(s.status.success());

    let e = run(
        d,
        &[
            "eval",
            "--checkpoint",
            "ck/final.pmck",
            "--data",
            "data.jsonl",
            "--out",
            "table.csv",
        ],
    );
    assert!(e.status.success(), "{}", stdout(&e));
    assert!(stdout(&e).contains("flip=false"));
    let table = std::fs::read_to_string(d.join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["metric", "MPJPE", "P-MPJPE", "MPJVE"]);
    assert!(table.lines().next().unwrap().ends_with(",Avg"));

    let f = run(
        d,
        &[
            "--flip",
            "eval",
            "--checkpoint",
            "ck/final.pmck",
            "--data",
            "data.jsonl",
        ],
    );
    assert!(stdout(&f).contains("flip=true"));

    let i = run(
        d,
        &[
            "infer",
            "--checkpoint",
            "ck/final.pmck",
            "--data",
            "data.jsonl",
            "--out",
            "pred.jsonl",
        ],
    );
    assert!(i.status.success(), "{}", stdout(&i));
    let pred = std::fs::read_to_string(d.join("pred.jsonl")).unwrap();
    let mut lines = pred.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["format"], "posemamba-predictions");
    let first: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(first["poses_3d"].as_array().unwrap().len(), 10 * 17 * 3);
    assert_eq!(lines.count(), 7);
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("train.toml"), TRAIN_TOML).unwrap();
    for out in ["a", "b"] {
        assert!(
            run(d, &["--config", "train.toml", "--seed", "11", "--out", out, "train"])
                .status
                .success()
        );
    }
    let a = std::fs::read(d.join("a/final.pmck")).unwrap();
    let b = std::fs::read(d.join("b/final.pmck")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "epochs = 1\nmystery = 3\n").unwrap();
    let o = run(d, &["--config", "bad.toml", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).starts_with("event=error code=2"));

    let o = run(d, &["eval", "--checkpoint", "missing.pmck", "--data", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(d, &["--precision", "16", "gradcheck"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(d, &["eval", "--checkpoint", "x", "--data", "y", "--protocol", "p9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let toml = format!("{TRAIN_TOML}[optimizer]\nlr = 1e300\n");
    std::fs::write(d.join("diverge.toml"), toml).unwrap();
    let o = run(d, &["--config", "diverge.toml", "--precision", "64", "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    assert!(stdout(&o).contains("event=error code=3"));
}

#[test]
fn gradcheck_passes_at_reduced_size() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("pass=true"));
}

#[test]
fn bench_scan_verifies_then_tabulates() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "bench-scan",
            "--lengths",
            "64,128",
            "--width",
            "8",
            "--repeats",
            "3",
            "--mode",
            "parallel",
        ],
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("verified_max_abs_diff="));
    assert!(text.contains("128,parallel,"));
    assert!(!text.contains("sequential"));
}

#[test]
fn ablate_emits_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let toml = TRAIN_TOML.replace("epochs = 2", "epochs = 1\nmax_steps = 1");
    std::fs::write(d.join("abl.toml"), toml).unwrap();
    let o = run(d, &["--config", "abl.toml", "--out", "abl.csv", "ablate"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("event=ablation ").count(), 6);
    let table = std::fs::read_to_string(d.join("abl.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(table.starts_with("strategy,T,params,MACs,final_loss,MPJPE"));
}
