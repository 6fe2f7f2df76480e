//! Labels a small dataset with the heuristic admin, fits the desk model for a
//! few epochs, saves it and plugs it into a room as the learned allocator.
//!
//!     cargo run --release --example train_and_deploy

use std::sync::Arc;

use ttm::domain::{Action, ActionKind, MemberId};
use ttm::engine::{EngineConfig, Room};
use ttm::matrix::MatrixKind;
use ttm::sentiment::LexiconScorer;
use ttm::simulator::{generate_dataset, Oracle, ScenarioConfig};
use ttm::ttransformer::{
    load_weights, save_weights, train, ModelConfig, ModelWeights, TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = ScenarioConfig::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/scenarios/mixed-ttm.toml"
    ))?;
    let data = generate_dataset(&scenario, Oracle::Heuristic, 300, 16)?;
    let cfg = TrainConfig {
        max_epochs: 8,
        ..TrainConfig::desk()
    };
    let outcome = train(ModelWeights::init(ModelConfig::desk(), 0)?, &cfg, &data)?;
    println!("initial test mse {:.4}", outcome.initial_test_mse);
    for e in &outcome.history {
        println!(
            "epoch {:2}  train {:.4}  test {:.4}",
            e.epoch, e.train_mse, e.test_mse
        );
    }

    let dir = std::env::temp_dir().join("ttm-train-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("weights.bin");
    save_weights(&outcome.weights, &path)?;
    let weights = Arc::new(load_weights(&path)?);
    println!(
        "saved {} parameters to {}",
        weights.parameter_count(),
        path.display()
    );

    let mut room = Room::new(
        "learned",
        "",
        EngineConfig::default(),
        MatrixKind::Learned(Some(weights)),
        Arc::new(LexiconScorer::default()),
    )?;
    let ann = MemberId::new("ann")?;
    room.join(ann.clone())?;
    room.join(MemberId::new("bob")?)?;
    for (t, text) in ["hello all", "thanks, good point", "I agree"]
        .iter()
        .enumerate()
    {
        let out = room.submit(&Action::new(
            ann.clone(),
            ActionKind::speak(*text),
            t as u64,
        ))?;
        println!(
            "{text:20} -> budget {:.3}",
            out.decision.map(|d| d.new_budget).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
