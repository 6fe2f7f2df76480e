use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ttm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.toml"))
        .display()
        .to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(ttm(&[]).status.code(), Some(1));
    assert_eq!(ttm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        ttm(&["gen-data", &scenario("mixed-ttm")]).status.code(),
        Some(1)
    );
    assert_eq!(
        ttm(&["train", "x", "--profile", "huge"]).status.code(),
        Some(1)
    );
    assert_eq!(
        ttm(&["compare", "a", "b", "--seeds", "0"]).status.code(),
        Some(1)
    );
    let help = ttm(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gradcheck"));
}

#[test]
fn runtime_errors_exit_2() {
    let out = ttm(&["simulate", "/definitely/missing.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "regime = \"low-control\"\nticks = 3\n[roster]\nlurker = 1\n",
    )
    .unwrap();
    assert_eq!(ttm(&["simulate", path(&bad)]).status.code(), Some(2));
    assert_eq!(
        ttm(&["eval", "nope.bin", "nope.txt"]).status.code(),
        Some(2)
    );
}

#[test]
fn simulate_writes_report_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = ttm(&[
        "simulate",
        &scenario("mixed-low-control"),
        "--seed",
        "2",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["seed"], 2);
    assert_eq!(report["regime"], "low-control");
    assert_eq!(report["rejected"], 0);
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("tick,atmosphere"));
    assert_eq!(
        csv.lines().count(),
        1 + report["ticks"].as_u64().unwrap() as usize
    );
}

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data: PathBuf = dir.path().join("data.txt");
    let model = dir.path().join("model");
    let out = ttm(&[
        "gen-data",
        &scenario("mixed-ttm"),
        "-n",
        "40",
        "--out",
        path(&data),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 40);

    let out = ttm(&[
        "train",
        path(&data),
        "--profile",
        "desk",
        "--max-epochs",
        "2",
        "--out",
        path(&model),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "weights.bin",
        "history.csv",
        "train.txt",
        "test.txt",
        "summary.json",
    ] {
        assert!(model.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model.join("summary.json")).unwrap())
            .unwrap();

    let out = ttm(&[
        "eval",
        path(&model.join("weights.bin")),
        path(&model.join("train.txt")),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let (got, want) = (
        eval["mse"].as_f64().unwrap(),
        summary["best_train_mse"].as_f64().unwrap(),
    );
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert_eq!(eval["samples"], summary["train_samples"]);
}

#[test]
fn compare_prints_a_table() {
    let out = ttm(&[
        "compare",
        &scenario("mixed-ttm"),
        &scenario("mixed-high-control"),
        "--seeds",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("  seed"));
    assert!(text.contains("mean"));
}

#[test]
fn gradcheck_passes() {
    let out = ttm(&["gradcheck", "--batch", "2"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}
