//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttm::domain::{ResourceStructure, ATMOSPHERE_SLOTS};
use ttm::engine::replay;
use ttm::matrix::{
    assemble_features, ATMOSPHERE_OFFSET, FEATURE_DIM, RESOURCE_COUNT_INDEX,
    RESOURCE_PROPORTION_INDEX,
};
use ttm::sentiment::{atmosphere_value, SentimentScore};
use ttm::service::{log_path, persist_room, restore_room, PersistError};
use ttm::simulator::{generate_dataset, run_scenario, Oracle, Regime, ScenarioConfig};
use ttm::ttransformer::{tiny_gradient_check, train, ModelConfig, ModelWeights, TrainConfig};
use ttm::vectorizer::EMBEDDING_DIM;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn scenario(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("scenarios")
            .join(format!("{name}.toml")),
    )
    .expect("bundled scenario")
}

fn atmosphere_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut in_range = 0;
    for _ in 0..10_000 {
        let s = SentimentScore::new(rng.random(), rng.random(), rng.random()).unwrap();
        let v = atmosphere_value(s).unwrap();
        if (-1.0..=1.0).contains(&v) {
            in_range += 1;
        }
    }
    let value = |p, n, c| atmosphere_value(SentimentScore::new(p, n, c).unwrap()).unwrap();
    let one = value(1.0, 0.0, 1.0);
    let balanced = (0..=10).all(|i| {
        let p = i as f64 / 10.0;
        value(p, p, 0.73) == 0.0
    });
    let mid = value(0.8, 0.1, 0.5);
    let elapsed = start.elapsed();
    verdict(
        in_range == 10_000 && one == 1.0 && balanced && (mid - 0.35).abs() <= 1e-12 && elapsed < Duration::from_secs(1),
        format!(
            "{in_range}/10000 in [-1,1]; (1,0,1) -> {one}; P=N -> 0: {balanced}; (0.8,0.1,0.5) -> {mid} (err {:.1e} <= 1e-12); {elapsed:.1?} < 1 s",
            (mid - 0.35).abs()
        ),
    )
}

fn feature_layout() -> Verdict {
    let action: Vec<f64> = (0..EMBEDDING_DIM).map(|i| 1000.0 + i as f64).collect();
    let rs = ResourceStructure {
        count: -7.0,
        proportion: -8.0,
    };
    let atm: Vec<f64> = (0..ATMOSPHERE_SLOTS)
        .map(|i| -0.01 * (i + 1) as f64)
        .collect();
    let f = assemble_features(&action, &rs, &atm).unwrap();
    let s = f.as_slice();
    let mut bad = Vec::new();
    for (i, v) in s.iter().enumerate() {
        let expected = match i {
            i if i < EMBEDDING_DIM => 1000.0 + i as f64,
            RESOURCE_COUNT_INDEX => -7.0,
            RESOURCE_PROPORTION_INDEX => -8.0,
            i => -0.01 * (i - ATMOSPHERE_OFFSET + 1) as f64,
        };
        if *v != expected {
            bad.push(i);
        }
    }
    let ok =
        s.len() == 1036 && FEATURE_DIM == EMBEDDING_DIM + 2 + ATMOSPHERE_SLOTS && bad.is_empty();
    verdict(
        ok,
        format!(
            "length {} = {EMBEDDING_DIM} + 2 + {ATMOSPHERE_SLOTS}; sentinel audit: {} misplaced slots",
            s.len(),
            bad.len()
        ),
    )
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let shape_ok = cfg.model_dim == 8
        && cfg.heads == 2
        && cfg.encoder_layers == 1
        && cfg.decoder_layers == 1
        && cfg.seq_len == 4;
    let report = tiny_gradient_check(0, 3, 1e-4).unwrap();
    let checked: usize = report.tensors.iter().map(|t| t.2).sum();
    let total = ModelWeights::zeros(cfg).unwrap().parameter_count();
    let worst = report.max_relative_error();
    let elapsed = start.elapsed();
    verdict(
        shape_ok && checked == total && worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "d=8 h=2 1+1 layers T=4: {} tensors, {checked}/{total} parameters, eps 1e-4, max rel err {worst:.2e} < 1e-3; {elapsed:.1?} < 60 s",
            report.tensors.len()
        ),
    )
}

fn training() -> Verdict {
    let start = Instant::now();
    let data = generate_dataset(&scenario("mixed-ttm"), Oracle::Heuristic, 2000, 16).unwrap();
    let cfg = TrainConfig::desk();
    let outcome = train(
        ModelWeights::init(ModelConfig::desk(), 0).unwrap(),
        &cfg,
        &data,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let labels: Vec<f64> = outcome
        .test_indices
        .iter()
        .map(|&i| data[i].label)
        .collect();
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let variance = labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / labels.len() as f64;
    let best = outcome.best();
    let last = outcome.history.len();
    let ok = best.test_mse < 0.5 * outcome.initial_test_mse
        && best.test_mse < variance
        && outcome.stopped_early
        && last - outcome.best_epoch <= cfg.patience
        && elapsed < Duration::from_secs(600);
    verdict(
        ok,
        format!(
            "2000 samples: test mse {:.4} vs initial {:.4} (< half) and label variance {variance:.4}; best epoch {} stopped at {last} (patience {}); {elapsed:.0?} < 10 min",
            best.test_mse, outcome.initial_test_mse, outcome.best_epoch, cfg.patience
        ),
    )
}

fn engine_fuzz() -> Verdict {
    let mut problems = Vec::new();
    let (mut accepted, mut rejected) = (0, 0);
    for seed in 0..10 {
        let (room, entries, findings) = common::fuzz_room(seed, 10_000);
        accepted += findings.accepted;
        rejected += findings.rejected;
        if !findings.clean() {
            problems.push(format!("seed {seed}: {findings:?}"));
        }
        let replayed = replay(&common::fuzz_spec(seed), None, &entries).unwrap();
        if replayed.state_hash() != room.state_hash() {
            problems.push(format!("seed {seed}: replay hash differs"));
        }
    }
    verdict(
        problems.is_empty(),
        format!(
            "10 seeds x 10000 actions ({accepted} accepted, {rejected} rejected): budgets in [0, cap], rejects change nothing, replay hashes equal; {} problems {}",
            problems.len(),
            problems.join("; ")
        ),
    )
}

fn regime_ordering() -> Verdict {
    let ttm = scenario("mixed-ttm");
    let high = scenario("mixed-high-control");
    let low = scenario("mixed-low-control");
    let ok_roster = [&ttm, &high, &low].iter().all(|c| {
        (
            c.roster.cooperative,
            c.roster.antagonist,
            c.roster.lurker,
            c.roster.task_focused,
        ) == (6, 2, 2, 0)
    });
    let regimes_ok = (ttm.regime, high.regime, low.regime)
        == (
            Regime::TtmHeuristic,
            Regime::HighControl,
            Regime::LowControl,
        );
    let (mut atm_wins, mut mute_order) = (0, 0);
    for seed in 1..=10 {
        let t = run_scenario(&ttm.with_seed(seed)).unwrap();
        let h = run_scenario(&high.with_seed(seed)).unwrap();
        let l = run_scenario(&low.with_seed(seed)).unwrap();
        if t.mean_atmosphere > h.mean_atmosphere {
            atm_wins += 1;
        }
        if h.mute_event_rate > t.mute_event_rate
            && t.mute_event_rate > l.mute_event_rate
            && l.mute_event_rate == 0.0
        {
            mute_order += 1;
        }
    }
    verdict(
        ok_roster && regimes_ok && atm_wins >= 8 && mute_order >= 8,
        format!("6/2/2 roster, seeds 1-10: atmosphere TTM > high control on {atm_wins}/10 (>= 8); mute rate high > TTM > low = 0 on {mute_order}/10 (>= 8)"),
    )
}

fn tasks() -> Verdict {
    let cfg = scenario("tasks-ttm");
    let completed: Vec<u64> = (1..=10)
        .map(|seed| run_scenario(&cfg.with_seed(seed)).unwrap().tasks_completed)
        .collect();
    verdict(
        cfg.regime == Regime::TtmHeuristic && cfg.roster.task_focused > 0 && completed.iter().all(|c| *c >= 1),
        format!("TTM with task-focused agents, seeds 1-10: completed tasks per seed {completed:?} (each >= 1)"),
    )
}

fn run_twice(args: &dyn Fn(&Path) -> Vec<String>, files: &[&str]) -> Result<usize, String> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = Command::new(env!("CARGO_BIN_EXE_ttm"))
            .args(args(d.path()))
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
    }
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs"));
        }
    }
    Ok(files.len())
}

fn determinism() -> Verdict {
    let scen = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/mixed-ttm.toml");
    let scen = scen.display().to_string();
    let data_dir = tempfile::tempdir().unwrap();
    let data: PathBuf = data_dir.path().join("data.txt");
    let setup = Command::new(env!("CARGO_BIN_EXE_ttm"))
        .args([
            "gen-data",
            &scen,
            "-n",
            "60",
            "--out",
            data.to_str().unwrap(),
        ])
        .output()
        .unwrap()
        .status;
    let s = |p: &Path| p.display().to_string();
    let results = [
        (
            "simulate",
            run_twice(
                &|d| {
                    vec![
                        "simulate".into(),
                        scen.clone(),
                        "--seed".into(),
                        "7".into(),
                        "--out".into(),
                        s(d),
                    ]
                },
                &["report.json", "trajectory.csv"],
            ),
        ),
        (
            "gen-data",
            run_twice(
                &|d| {
                    vec![
                        "gen-data".into(),
                        scen.clone(),
                        "-n".into(),
                        "60".into(),
                        "--seed".into(),
                        "3".into(),
                        "--out".into(),
                        s(&d.join("d.txt")),
                    ]
                },
                &["d.txt"],
            ),
        ),
        (
            "train",
            run_twice(
                &|d| {
                    vec![
                        "train".into(),
                        s(&data),
                        "--profile".into(),
                        "desk".into(),
                        "--max-epochs".into(),
                        "3".into(),
                        "--out".into(),
                        s(d),
                    ]
                },
                &[
                    "weights.bin",
                    "history.csv",
                    "train.txt",
                    "test.txt",
                    "summary.json",
                ],
            ),
        ),
    ];
    let ok = setup.success() && results.iter().all(|(_, r)| r.is_ok());
    let detail = results
        .iter()
        .map(|(name, r)| match r {
            Ok(n) => format!("{name}: {n} files identical"),
            Err(e) => format!("{name}: {e}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(ok, detail)
}

fn persistence() -> Verdict {
    let (live, entries, _) = common::fuzz_room(7, 3_000);
    let spec = common::fuzz_spec(7);
    let dir = tempfile::tempdir().unwrap();
    let room = persist_room(dir.path(), &spec, &entries, None).unwrap();
    let log = log_path(dir.path(), &spec.room_id).unwrap();
    let restored = restore_room(&log, None, None).unwrap();
    let round_trip = restored.room.state_hash() == live.state_hash()
        && room.room().state_hash() == live.state_hash();

    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let target = lines.len() / 2;
    let tampered_line = lines[target].replacen("\"state_hash\":\"", "\"state_hash\":\"0", 1);
    lines[target] = &tampered_line;
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    let detected = matches!(
        restore_room(&log, None, None),
        Err(PersistError::CorruptLog { .. })
    );
    verdict(
        round_trip && detected,
        format!(
            "{} log records: restored hash equal: {round_trip}; tampered record {target} detected: {detected}",
            room.records()
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("atmosphere formula", atmosphere_suite),
        ("feature layout", feature_layout),
        ("gradient check", gradient_check),
        ("training", training),
        ("engine fuzz", engine_fuzz),
        ("regime ordering", regime_ordering),
        ("tasks", tasks),
        ("determinism", determinism),
        ("persistence", persistence),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let run: Vec<_> = criteria
        .into_iter()
        .enumerate()
        .filter(|(_, (name, _))| only.as_deref().is_none_or(|o| name.contains(o)))
        .collect();
    println!("\nacceptance: {} criteria", run.len());
    for (i, (name, check)) in run {
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} {}. {name}: {}", i + 1, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    println!("acceptance: {failed} failed\n");
    if failed > 0 {
        std::process::exit(1);
    }
}
