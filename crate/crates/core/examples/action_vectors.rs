//! TF-IDF weighted word vectors: each message is embedded against the
//! messages before it, so words everyone uses fade out.
//!
//!     cargo run --example action_vectors

use ttm::vectorizer::{action_vector, CorpusStats, EMBEDDING_DIM};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn main() {
    let mut stats = CorpusStats::new();
    let messages = [
        "the release is scheduled for friday",
        "can we move the release to monday",
        "monday works for the release",
        "lunch anyone",
        "the release notes need review",
    ];
    let vectors: Vec<_> = messages
        .iter()
        .map(|m| action_vector(&mut stats, m))
        .collect();
    println!("{EMBEDDING_DIM}-dim action vectors; the first has no corpus yet and is zero");
    for (i, (m, v)) in messages.iter().zip(&vectors).enumerate() {
        let sims: Vec<String> = vectors
            .iter()
            .map(|w| format!("{:+.2}", cosine(v.as_slice(), w.as_slice())))
            .collect();
        println!("{i} {m:38} zero={:<5} [{}]", v.is_zero(), sims.join(" "));
    }
    println!(
        "document frequency of 'release': {}",
        stats.document_frequency("release")
    );
}
