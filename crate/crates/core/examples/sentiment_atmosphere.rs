//! Scores a short exchange with the bundled lexicon and shows how the
//! atmosphere window moves.
//!
//!     cargo run --example sentiment_atmosphere

use ttm::domain::AtmosphereWindow;
use ttm::sentiment::{atmosphere_value, atmosphere_vector, LexiconScorer, SentimentScorer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scorer = LexiconScorer::default();
    let lines = [
        "thanks, that is a great idea",
        "I agree, nice work on the draft",
        "this is a terrible and useless plan",
        "the meeting moved to room four",
        "happy to help with the review",
    ];
    let mut window = AtmosphereWindow::new();
    for line in lines {
        let score = scorer.score(line);
        let value = atmosphere_value(score)?;
        window.push(value);
        println!(
            "{line:40} P={:.2} N={:.2} C={:.2} -> {value:+.3}  (mean {:+.3})",
            score.positive,
            score.negative,
            score.confidence,
            window.mean()
        );
    }
    println!("window: {:?}", atmosphere_vector(&window));
    Ok(())
}
