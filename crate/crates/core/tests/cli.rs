use std::path::Path;
use std::process::{Command, Output};

fn gazby(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazby"))
        .args(args)
        .env_remove("GAZBY_SEED")
        .output()
        .expect("binary runs")
}

fn small_overrides() -> Vec<&'static str> {
    vec![
        "--set",
        "layers=1",
        "--set",
        "heads=2",
        "--set",
        "d_model=16",
        "--set",
        "d_ff=32",
        "--set",
        "epochs=1",
        "--set",
        "max_steps=4",
        "--set",
        "gaze.epochs=1",
    ]
}

fn run_ok(cmd: &str, config: &Path, extra: &[&str]) -> String {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend(small_overrides());
    args.extend(extra);
    let out = gazby(&args);
    assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_train_rerank_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = gazby(&["synth", "--out", dir.path().to_str().unwrap(), "--seed", "3"]);
    assert!(out.status.success());
    let config = dir.path().join("config.txt");
    run_ok("train-gaze", &config, &[]);
    run_ok("train-ranker", &config, &[]);
    run_ok("rerank", &config, &["--mode", "first_layer"]);
    let report = run_ok("evaluate", &config, &["--k", "5"]);
    assert!(report.contains("nDCG@5\tall\t"), "{report}");
    let run = std::fs::read_to_string(dir.path().join("run.txt")).unwrap();
    assert!(run.lines().all(|l| l.split_whitespace().count() == 6));
}

#[test]
fn bad_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.txt");
    std::fs::write(&config, "d_model = 30\nheads = 4\n").unwrap();
    let out = gazby(&["rerank", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let out = gazby(&["evaluate", "--config", config.to_str().unwrap(), "--set", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = gazby(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
