//! Tokenization, streaming TF-IDF statistics and hash-seeded word vectors.
//!
//! Every chat message is one document. Statistics grow online, per room, and
//! an action vector is always computed against the statistics as they stood
//! *before* the message was added.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dimension of word and action vectors.
pub const EMBEDDING_DIM: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VectorizerError {
    #[error("cannot embed an empty token")]
    EmptyToken,
}

/// Lowercased Unicode-alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: u64,
    pub doc_frequency: BTreeMap<String, u64>,
}

impl CorpusStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one document. Empty documents are not counted.
    pub fn add_document<S: AsRef<str>>(&mut self, tokens: &[S]) {
        if tokens.is_empty() {
            return;
        }
        self.doc_count += 1;
        let mut seen: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        seen.sort_unstable();
        seen.dedup();
        for token in seen {
            *self.doc_frequency.entry(token.to_owned()).or_insert(0) += 1;
        }
    }

    pub fn document_frequency(&self, token: &str) -> u64 {
        self.doc_frequency.get(token).copied().unwrap_or(0)
    }
}

/// `(tf / len) * ln(N / df)`. Unseen tokens and an empty corpus weigh zero.
pub fn tfidf_weight(stats: &CorpusStats, token: &str, tf: usize, len: usize) -> f64 {
    if stats.doc_count == 0 || len == 0 {
        return 0.0;
    }
    let df = match stats.document_frequency(token) {
        0 => return 0.0,
        df => df,
    };
    (tf as f64 / len as f64) * (stats.doc_count as f64 / df as f64).ln()
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Unit-length Gaussian vector seeded by the token's hash.
pub fn word_vector(token: &str) -> Result<Vec<f64>, VectorizerError> {
    if token.is_empty() {
        return Err(VectorizerError::EmptyToken);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()));
    let mut v: Vec<f64> = (0..EMBEDDING_DIM)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// A 1024-dimensional sentence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(Vec<f64>);

impl ActionVector {
    pub fn zeros() -> Self {
        Self(vec![0.0; EMBEDDING_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| *x == 0.0)
    }
}

impl AsRef<[f64]> for ActionVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Memoizes word vectors. Not part of any persisted state.
#[derive(Debug, Default, Clone)]
pub struct EmbeddingCache {
    vectors: HashMap<String, Arc<[f64]>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, token: &str) -> Arc<[f64]> {
        if let Some(v) = self.vectors.get(token) {
            return Arc::clone(v);
        }
        let v: Arc<[f64]> = word_vector(token)
            .expect("tokenizer never yields empty tokens")
            .into();
        self.vectors.insert(token.to_owned(), Arc::clone(&v));
        v
    }
}

/// TF-IDF weighted mean of word vectors, then folds `text` into `stats`.
pub fn action_vector(stats: &mut CorpusStats, text: &str) -> ActionVector {
    action_vector_cached(stats, text, &mut EmbeddingCache::new())
}

pub fn action_vector_cached(
    stats: &mut CorpusStats,
    text: &str,
    cache: &mut EmbeddingCache,
) -> ActionVector {
    let tokens = tokenize(text);
    let v = weighted_embedding(stats, &tokens, cache);
    stats.add_document(&tokens);
    v
}

/// The action vector of already tokenized text against `stats`, without
/// recording the document.
pub fn weighted_embedding(
    stats: &CorpusStats,
    tokens: &[String],
    cache: &mut EmbeddingCache,
) -> ActionVector {
    if tokens.is_empty() {
        return ActionVector::zeros();
    }
    // BTreeMap fixes the summation order, so token order never matters.
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let len = tokens.len();
    let mut acc = vec![0.0; EMBEDDING_DIM];
    let mut total_weight = 0.0;
    for (token, tf) in &counts {
        let w = tfidf_weight(stats, token, *tf, len);
        if w == 0.0 {
            continue;
        }
        let v = cache.get(token);
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += w * x;
        }
        total_weight += w;
    }
    if total_weight == 0.0 {
        return ActionVector::zeros();
    }
    for a in &mut acc {
        *a /= total_weight;
    }
    ActionVector(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello, WORLD!"), vec!["hello", "world"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a1 b2  b2"), vec!["a1", "b2", "b2"]);
        assert_eq!(tokenize("naïve café"), vec!["naïve", "café"]);
    }

    fn stats_with(docs: &[&str]) -> CorpusStats {
        let mut s = CorpusStats::new();
        for d in docs {
            s.add_document(&tokenize(d));
        }
        s
    }

    #[test]
    fn tfidf_examples() {
        let s = stats_with(&["x a", "x b", "x c", "x d"]);
        assert_eq!(tfidf_weight(&s, "x", 3, 7), 0.0);
        let w = tfidf_weight(&s, "a", 2, 10);
        assert!((w - 0.2 * 4f64.ln()).abs() < 1e-12);
        assert!((w - 0.27726).abs() < 1e-5);
        assert_eq!(tfidf_weight(&CorpusStats::new(), "a", 1, 1), 0.0);
        assert_eq!(tfidf_weight(&s, "unseen", 1, 1), 0.0);
    }

    #[test]
    fn repeated_token_counts_once_per_document() {
        let s = stats_with(&["go go go"]);
        assert_eq!(s.doc_count, 1);
        assert_eq!(s.document_frequency("go"), 1);
    }

    #[test]
    fn word_vectors_are_deterministic_unit_vectors() {
        let a = word_vector("hello").unwrap();
        let b = word_vector("hello").unwrap();
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(word_vector(""), Err(VectorizerError::EmptyToken));
    }

    #[test]
    fn distinct_words_are_nearly_orthogonal() {
        let mut total = 0.0;
        for i in 0..100 {
            let a = word_vector(&format!("left{i}")).unwrap();
            let b = word_vector(&format!("right{i}")).unwrap();
            total += a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().abs();
        }
        assert!(total / 100.0 < 0.1);
    }

    #[test]
    fn empty_text_gives_zero_vector_and_no_document() {
        let mut s = stats_with(&["a b"]);
        let v = action_vector(&mut s, "  !! ");
        assert!(v.is_zero());
        assert_eq!(v.as_slice().len(), EMBEDDING_DIM);
        assert_eq!(s.doc_count, 1);
    }

    #[test]
    fn single_weighted_token_returns_its_word_vector() {
        let mut s = stats_with(&["rare", "other", "other"]);
        let v = action_vector(&mut s, "rare");
        let expected = word_vector("rare").unwrap();
        for (a, b) in v.as_slice().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s.doc_count, 4);
    }

    #[test]
    fn two_token_text_matches_brute_force() {
        let docs = ["apple pie", "apple tart", "cherry pie", "plum"];
        let mut s = stats_with(&docs);
        let text = "apple cherry cherry";
        // Independent recomputation straight from the definitions.
        let n = docs.len() as f64;
        let w_apple = (1.0 / 3.0) * (n / 2.0).ln();
        let w_cherry = (2.0 / 3.0) * (n / 1.0).ln();
        let va = word_vector("apple").unwrap();
        let vc = word_vector("cherry").unwrap();
        let expected: Vec<f64> = va
            .iter()
            .zip(&vc)
            .map(|(a, c)| (w_apple * a + w_cherry * c) / (w_apple + w_cherry))
            .collect();
        let got = action_vector(&mut s, text);
        for (g, e) in got.as_slice().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-9);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let msgs = ["hi there", "good game", "hi again", "bad game"];
        let run = || {
            let mut s = CorpusStats::new();
            let vs: Vec<ActionVector> = msgs.iter().map(|m| action_vector(&mut s, m)).collect();
            (s, vs)
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn token_order_does_not_matter(words in proptest::collection::vec("[a-e]{1,3}", 1..8), seed in any::<u64>()) {
            let base = stats_with(&["a b c", "aa bb", "c d e", "ab cd", "a"]);
            let mut shuffled = words.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let v1 = action_vector(&mut base.clone(), &words.join(" "));
            let v2 = action_vector(&mut base.clone(), &shuffled.join(" "));
            prop_assert_eq!(v1.as_slice().len(), EMBEDDING_DIM);
            prop_assert_eq!(v1, v2);
        }
    }
}
