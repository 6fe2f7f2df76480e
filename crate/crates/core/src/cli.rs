//! The `ttm` command line. `main` only forwards to [`run`].

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::engine::RoomSpec;
use crate::service::{Server, ServiceConfig};
use crate::simulator::{compare, generate_dataset, run_scenario, Oracle, Regime, ScenarioConfig};
use crate::ttransformer::{
    load_weights, mse, read_dataset, save_weights, tiny_gradient_check, train, write_dataset,
    LabeledSample, ModelConfig, ModelWeights, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Maximum relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "ttm", version, about = "Tribal Theater Model chat regulation")]
struct Cli {
    /// Log filter, e.g. `info` or `ttm=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OracleArg {
    Heuristic,
    Rule,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegimeArg {
    HighControl,
    LowControl,
    TtmHeuristic,
    TtmLearned,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::HighControl => Regime::HighControl,
            RegimeArg::LowControl => Regime::LowControl,
            RegimeArg::TtmHeuristic => Regime::TtmHeuristic,
            RegimeArg::TtmLearned => Regime::TtmLearned,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario; writes report.json and trajectory.csv.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario's regime.
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate an allocator-labeled dataset file.
    GenData {
        scenario: PathBuf,
        #[arg(short = 'n', long)]
        n: usize,
        #[arg(long, value_enum, default_value = "heuristic")]
        oracle: OracleArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = crate::matrix::DEFAULT_HISTORY)]
        seq_len: usize,
        #[arg(long, default_value = "dataset.txt")]
        out: PathBuf,
    },
    /// Train the transformer; writes weights.bin, history.csv, train.txt,
    /// test.txt and summary.json.
    Train {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, default_value = "model")]
        out: PathBuf,
    },
    /// Mean squared error of a weight file on a dataset.
    Eval { weights: PathBuf, dataset: PathBuf },
    /// Serve rooms over WebSocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Keep room logs and snapshots here.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// TOML room settings: topic, [engine], [matrix], [scorer].
        #[arg(long)]
        room_config: Option<PathBuf>,
    },
    /// Run two scenarios over the same seeds and tabulate the metrics.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        first_seed: u64,
        /// Also write every report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 3)]
        batch: usize,
    },
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

enum Failure {
    Usage(String),
    Runtime(BoxError),
}

impl<E: Into<BoxError>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log)
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let mut shown = e.to_string();
            let _ = writeln!(err, "error: {shown}");
            let mut source = e.source();
            while let Some(s) = source {
                let text = s.to_string();
                if !shown.contains(&text) {
                    let _ = writeln!(err, "  caused by: {text}");
                    shown.push_str(&text);
                }
                source = s.source();
            }
            EXIT_RUNTIME
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| format!("creating {}: {e}", dir.display()).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("writing {}: {e}", path.display()).into())
}

fn label_variance(samples: &[&LabeledSample]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.label).sum::<f64>() / n;
    samples
        .iter()
        .map(|s| (s.label - mean).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Serialize)]
struct TrainSummary {
    profile: &'static str,
    samples: usize,
    train_samples: usize,
    test_samples: usize,
    initial_train_mse: f64,
    initial_test_mse: f64,
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    best_train_mse: f64,
    best_test_mse: f64,
    test_label_variance: f64,
    model: ModelConfig,
    training: TrainConfig,
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    mse: f64,
    rmse: f64,
    label_variance: f64,
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            scenario,
            seed,
            regime,
            out: dir,
        } => {
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            if let Some(r) = regime {
                cfg = cfg.with_regime(r.into());
                cfg.validate()?;
            }
            let report = run_scenario(&cfg)?;
            create_dir(&dir)?;
            report.write_json(dir.join("report.json"))?;
            report.write_trajectory_csv(dir.join("trajectory.csv"))?;
            writeln!(
                out,
                "{} [{}] seed {}: {} messages, atmosphere {:.4}, mute rate {:.4}, gini {:.3}, tasks {}/{}",
                report.scenario,
                report.regime.name(),
                report.seed,
                report.messages,
                report.mean_atmosphere,
                report.mute_event_rate,
                report.participation_gini,
                report.tasks_completed,
                report.tasks_issued,
            )?;
        }
        Command::GenData {
            scenario,
            n,
            oracle,
            seed,
            seq_len,
            out: path,
        } => {
            if n == 0 || seq_len == 0 {
                return Err(Failure::Usage("-n and --seq-len must be at least 1".into()));
            }
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let oracle = match oracle {
                OracleArg::Heuristic => Oracle::Heuristic,
                OracleArg::Rule => Oracle::Rule,
            };
            let samples = generate_dataset(&cfg, oracle, n, seq_len)?;
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_dataset(&path, &samples)?;
            writeln!(out, "wrote {} samples to {}", samples.len(), path.display())?;
        }
        Command::Train {
            dataset,
            profile,
            seed,
            max_epochs,
            learning_rate,
            out: dir,
        } => {
            let (model, mut training, name) = match profile {
                Profile::Desk => (ModelConfig::desk(), TrainConfig::desk(), "desk"),
                Profile::Paper => (ModelConfig::paper(), TrainConfig::paper(), "paper"),
            };
            training.seed = seed;
            if let Some(e) = max_epochs {
                training.max_epochs = e;
            }
            if let Some(lr) = learning_rate {
                training.learning_rate = lr;
            }
            if training.max_epochs == 0 {
                return Err(Failure::Usage("--max-epochs must be at least 1".into()));
            }
            let samples = read_dataset(&dataset)?;
            if let Some(s) = samples.iter().find(|s| s.sequence.len() != model.seq_len) {
                return Err(format!(
                    "dataset sequences have {} steps, the {name} profile expects {}",
                    s.sequence.len(),
                    model.seq_len
                )
                .into());
            }
            let weights = ModelWeights::init(model, seed)?;
            let outcome = train(weights, &training, &samples)?;
            create_dir(&dir)?;
            save_weights(&outcome.weights, dir.join("weights.bin"))?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
            let (train_set, test_set) = (pick(&outcome.train_indices), pick(&outcome.test_indices));
            write_dataset(dir.join("train.txt"), train_set.iter().copied())?;
            write_dataset(dir.join("test.txt"), test_set.iter().copied())?;
            let mut history = String::from("epoch,train_mse,test_mse\n");
            for h in &outcome.history {
                history += &format!("{},{},{}\n", h.epoch, h.train_mse, h.test_mse);
            }
            fs::write(dir.join("history.csv"), history)?;
            let best = *outcome.best();
            write_json(
                &dir.join("summary.json"),
                &TrainSummary {
                    profile: name,
                    samples: samples.len(),
                    train_samples: train_set.len(),
                    test_samples: test_set.len(),
                    initial_train_mse: outcome.initial_train_mse,
                    initial_test_mse: outcome.initial_test_mse,
                    best_epoch: outcome.best_epoch,
                    epochs_run: outcome.history.len(),
                    stopped_early: outcome.stopped_early,
                    best_train_mse: best.train_mse,
                    best_test_mse: best.test_mse,
                    test_label_variance: label_variance(&test_set),
                    model,
                    training,
                },
            )?;
            writeln!(
                out,
                "best epoch {} of {}: train mse {:.6}, test mse {:.6} (initial test {:.6})",
                outcome.best_epoch,
                outcome.history.len(),
                best.train_mse,
                best.test_mse,
                outcome.initial_test_mse
            )?;
        }
        Command::Eval { weights, dataset } => {
            let weights = load_weights(&weights)?;
            let samples = read_dataset(&dataset)?;
            if samples.is_empty() {
                return Err("dataset is empty".into());
            }
            let refs: Vec<&LabeledSample> = samples.iter().collect();
            let mse = mse(&weights, &refs)?;
            let report = EvalReport {
                samples: refs.len(),
                mse,
                rmse: mse.sqrt(),
                label_variance: label_variance(&refs),
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            )?;
        }
        Command::Serve {
            listen,
            data_dir,
            room_config,
        } => {
            let mut config = ServiceConfig::new(listen);
            config.data_dir = data_dir;
            if let Some(path) = room_config {
                let text = fs::read_to_string(&path)
                    .map_err(|e| format!("reading {}: {e}", path.display()))?;
                let mut table: toml::Table = toml::from_str(&text)?;
                table.insert("room_id".into(), "template".into());
                config.room_template = table.try_into::<RoomSpec>()?;
            }
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?;
            runtime.block_on(async {
                let server = Server::bind(config).await?;
                log::info!("listening on {}", server.local_addr());
                eprintln!("listening on ws://{}", server.local_addr());
                server
                    .run_until(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
        }
        Command::Compare {
            a,
            b,
            seeds,
            first_seed,
            out: dir,
        } => {
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be at least 1".into()));
            }
            let (ca, cb) = (ScenarioConfig::load(&a)?, ScenarioConfig::load(&b)?);
            let comparison = compare(&ca, &cb, first_seed, seeds)?;
            write!(out, "{}", comparison.table())?;
            if let Some(dir) = dir {
                create_dir(&dir)?;
                write_json(&dir.join("comparison.json"), &comparison)?;
            }
        }
        Command::Gradcheck { seed, eps, batch } => {
            if !(eps > 0.0) || batch == 0 {
                return Err(Failure::Usage("--eps must be > 0 and --batch >= 1".into()));
            }
            let report = tiny_gradient_check(seed, batch, eps)?;
            for (name, err, count) in &report.tensors {
                writeln!(out, "{name:<28} {count:>6} params  max rel err {err:.3e}")?;
            }
            let worst = report.max_relative_error();
            let verdict = if worst < GRADCHECK_TOLERANCE {
                "PASS"
            } else {
                "FAIL"
            };
            writeln!(
                out,
                "{verdict}: max relative error {worst:.3e} over {} tensors (tolerance {GRADCHECK_TOLERANCE:e})",
                report.tensors.len()
            )?;
            if worst >= GRADCHECK_TOLERANCE {
                return Err("gradient check failed".into());
            }
        }
    }
    Ok(())
}
