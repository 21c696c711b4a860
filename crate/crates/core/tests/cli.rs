use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tmrd::trainer::CSV_HEADER;

fn tmrd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmrd")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_data(dir: &Path) -> PathBuf {
    let path = dir.join("d.tmrd");
    let p = path.to_str().unwrap();
    let out = tmrd(&["gen-data", "--seed", "5", "--count", "40", "--ratio", "0.25", "--test-count", "10", "--out", p]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

const SHORT: [&str; 10] = [
    "--set",
    "train.burn_in_iterations=6",
    "--set",
    "train.total_iterations=20",
    "--set",
    "train.n=6",
    "--set",
    "train.n_prime=4",
    "--set",
    "train.eval_interval=10",
];

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&tmrd(&[])), 1);
    assert_eq!(code(&tmrd(&["bogus"])), 1);
    assert_eq!(code(&tmrd(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.tmrd");
    let bad = tmrd(&["gen-data", "--ratio", "1.0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&bad), 1);
    assert!(!out.exists());
    let missing = tmrd(&["eval", "--data", "/nonexistent/d.tmrd", "--checkpoint", "/nonexistent/c.tmrc"]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(dir.path());
    let b = dir.path().join("again.tmrd");
    tmrd(&[
        "gen-data",
        "--seed",
        "5",
        "--count",
        "40",
        "--ratio",
        "0.25",
        "--test-count",
        "10",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_errors_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = tmrd(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        dir.path().join("o").to_str().unwrap(),
        "--set",
        "train.alpha=2",
        "--set",
        "train.nope=1",
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("train.alpha"), "{err}");
    assert!(err.contains("train.nope"), "{err}");
}

#[test]
fn classical_run_leaves_refinement_column_empty() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let od = dir.path().join("run");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out-dir", od.to_str().unwrap()];
    args.extend(SHORT);
    args.extend(["--set", "train.mode=classical_ema"]);
    let out = tmrd(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let csv = std::fs::read_to_string(od.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let tmr_col = CSV_HEADER.split(',').position(|c| c == "loss_tmr").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r[tmr_col].is_empty()));
    assert!(rows.iter().all(|r| r[1] != "tmr"));

    let eval =
        tmrd(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", od.join("checkpoint.tmrc").to_str().unwrap()]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("AP50:95"));
}

#[test]
fn divergence_exits_two_and_keeps_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let od = dir.path().join("run");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out-dir", od.to_str().unwrap()];
    args.extend(SHORT);
    args.extend(["--set", "train.burn_in_lr=1e200"]);
    let out = tmrd(&args);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(std::fs::read_to_string(od.join("metrics.csv")).unwrap().starts_with(CSV_HEADER));
}

#[test]
fn resume_refuses_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let ckpt = dir.path().join("b.tmrc");
    let mut args = vec!["burnin", "--data", data.to_str().unwrap(), "--out", ckpt.to_str().unwrap()];
    args.extend(SHORT);
    assert_eq!(code(&tmrd(&args)), 0);
    let out = tmrd(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        dir.path().join("o").to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
        "--set",
        "train.seed=1",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn ablate_rejects_empty_and_unknown_specs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let spec = dir.path().join("rows.txt");
    std::fs::write(&spec, "# nothing here\n").unwrap();
    let d = data.to_str().unwrap();
    assert_eq!(code(&tmrd(&["ablate", "--data", d, "--spec", spec.to_str().unwrap()])), 1);
    assert_eq!(code(&tmrd(&["ablate", "--data", d, "--rows", "A9"])), 1);
}

#[test]
fn ablate_writes_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let od = dir.path().join("abl");
    let mut args =
        vec!["ablate", "--data", data.to_str().unwrap(), "--rows", "A1,A12", "--out-dir", od.to_str().unwrap()];
    args.extend(SHORT);
    let out = tmrd(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(od.join("ablation.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim_end(), table.trim_end());
    assert!(table.lines().next().unwrap().starts_with("Abl."));
    let csv = std::fs::read_to_string(od.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 2);
}

#[test]
fn gradcheck_single_target() {
    let out = tmrd(&["gradcheck", "--target", "tmr"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.contains("PASS")).count(), 1);
    assert!(text.contains("tmr"));
    assert_eq!(code(&tmrd(&["gradcheck", "--target", "theta"])), 1);
}
