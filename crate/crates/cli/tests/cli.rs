use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn adalea(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adalea"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

fn small_dataset(dir: &Path) {
    write(
        dir,
        "gen.json",
        r#"{"synthetic": {"num_clips": 40, "num_frames": 20, "precursor_onset_frames": 8, "seed": 3}}"#,
    );
    let out = adalea(&["gen-data", "--config", "gen.json", "--out", "data"], dir);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_eval_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    write(
        dir,
        "train.json",
        r#"{"loss": {"variant": "AdaLEA"}, "model": {"hidden_size": 4}, "epochs": 2, "learning_rate": 0.01}"#,
    );
    let out = adalea(
        &[
            "train",
            "--config",
            "train.json",
            "--data",
            "data",
            "--out",
            "run",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "config.json",
        "checkpoint.bin",
        "history.csv",
        "report.json",
        "curve_risk.csv",
    ] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }

    let out = adalea(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "data",
        ],
        dir,
    );
    assert!(out.status.success());
    let printed = String::from_utf8(out.stdout).unwrap();
    let saved = fs::read_to_string(dir.join("run/report.json")).unwrap();
    assert_eq!(printed, saved);

    let out = adalea(&["compare", "run", "--out", "cmp"], dir);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("AdaLEA"));
    assert!(dir.join("cmp/comparison.csv").exists());
}

#[test]
fn schedule_prints_csv() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "loss.json", r#"{"variant": "LEA"}"#);
    let out = adalea(
        &[
            "schedule",
            "--config",
            "loss.json",
            "--epochs",
            "2",
            "--frames",
            "5",
        ],
        tmp.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,t,d,alpha");
    assert_eq!(lines.len(), 1 + 2 * 5);
    // Epoch 2 saturates d ≤ 3.
    assert_eq!(lines[7], "2,2,3,1");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "bad.json",
        r#"{"loss": {"variant": "EL"}, "epochs": 1, "bogus": true}"#,
    );
    let out = adalea(
        &[
            "train", "--config", "bad.json", "--data", "data", "--out", "r",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));

    write(
        dir,
        "ok.json",
        r#"{"loss": {"variant": "EL"}, "model": {}, "epochs": 1}"#,
    );
    let out = adalea(
        &[
            "train", "--config", "ok.json", "--data", "absent", "--out", "r",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(3));

    let out = adalea(&["compare", "no-such-run"], dir);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-run"));

    let out = adalea(
        &["eval", "--checkpoint", "none.bin", "--data", "absent"],
        dir,
    );
    assert_eq!(out.status.code(), Some(3));
}
