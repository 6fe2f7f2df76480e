//! The four allocators side by side on the same member and atmosphere.
//!
//!     cargo run --example allocators

use std::sync::Arc;

use ttm::domain::{Action, ActionKind, MemberId, ResourceStructure};
use ttm::matrix::{
    allocate, assemble_features, AllocationContext, HeuristicConfig, MatrixKind, RuleConfig,
};
use ttm::ttransformer::{ModelConfig, ModelWeights};
use ttm::vectorizer::EMBEDDING_DIM;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let actor = MemberId::new("ann")?;
    let ctx = AllocationContext {
        actor: &actor,
        budget_cap: 5.0,
        tribe_size: 4,
    };
    let learned = ModelWeights::init(ModelConfig::desk(), 1)?;
    let matrices = [
        MatrixKind::NoOp,
        MatrixKind::Rule(RuleConfig::default()),
        MatrixKind::Heuristic(HeuristicConfig::default()),
        MatrixKind::Learned(Some(Arc::new(learned))),
    ];
    let cases = [
        ("polite, hoarding", "thanks for the update", 4.0, 0.6, 0.4),
        ("polite, starved", "thanks for the update", 1.0, 0.05, 0.4),
        ("hostile room", "this plan is garbage", 3.0, 0.25, -0.6),
    ];
    for (label, text, count, proportion, atm) in cases {
        let rs = ResourceStructure { count, proportion };
        let features = Arc::new(assemble_features(
            &vec![0.0; EMBEDDING_DIM],
            &rs,
            &[atm; 10],
        )?);
        let action = Action::new(actor.clone(), ActionKind::speak(text), 0);
        print!("{label:18}");
        for m in &matrices {
            let d = allocate(m, &features, &[], &action, &rs, &ctx)?;
            let mute = d.mute_for.map(|t| format!(" mute {t}")).unwrap_or_default();
            print!("  {}={:.2}{mute}", m.name(), d.new_budget);
        }
        println!();
    }
    Ok(())
}
