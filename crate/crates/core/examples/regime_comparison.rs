//! Runs the mixed scenario under all three regimes on ten seeds and prints
//! the orderings.
//!
//!     cargo run --example regime_comparison

use ttm::simulator::{compare, Regime, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios");
    let ttm = ScenarioConfig::load(format!("{dir}/mixed-ttm.toml"))?;
    let high = ttm.with_regime(Regime::HighControl);
    let low = ttm.with_regime(Regime::LowControl);

    let vs_high = compare(&ttm, &high, 1, 10)?;
    print!("{}", vs_high.table());
    let vs_low = compare(&ttm, &low, 1, 10)?;
    print!("{}", vs_low.table());

    let atm = vs_high.wins_a(|r| r.mean_atmosphere);
    let mut mute_order = 0;
    for i in 0..10 {
        let (t, h, l) = (
            vs_high.reports_a[i].mute_event_rate,
            vs_high.reports_b[i].mute_event_rate,
            vs_low.reports_b[i].mute_event_rate,
        );
        if h > t && t > l && l == 0.0 {
            mute_order += 1;
        }
    }
    println!("atmosphere ttm > high-control: {atm}/10");
    println!("mute rate high > ttm > low = 0: {mute_order}/10");
    Ok(())
}
