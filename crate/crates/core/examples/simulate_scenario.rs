//! Runs a bundled scenario once and prints its report.
//!
//!     cargo run --example simulate_scenario -- tasks-ttm 3

use ttm::simulator::{run_scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "mixed-ttm".into());
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let path = format!("{}/scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    let report = run_scenario(&ScenarioConfig::load(path)?.with_seed(seed))?;
    println!(
        "{} under {} (seed {seed})",
        report.scenario,
        report.regime.name()
    );
    println!("  messages          {}", report.messages);
    println!(
        "  accepted/rejected {}/{}",
        report.accepted, report.rejected
    );
    println!("  mean atmosphere   {:+.4}", report.mean_atmosphere);
    println!("  mute event rate   {:.4}", report.mute_event_rate);
    println!("  participation gini {:.3}", report.participation_gini);
    println!(
        "  tasks             {}/{} completed",
        report.tasks_completed, report.tasks_issued
    );
    println!("  admin             {:?}", report.admin);
    println!("  final hash        {}", report.final_state_hash);
    Ok(())
}
