//! Sentiment scoring and the per-message atmosphere value.
//!
//! The room only ever sees a [`SentimentScore`]; which scorer produced it is
//! irrelevant to the engine. The default is a word-list scorer.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AtmosphereWindow, ATMOSPHERE_SLOTS};
use crate::vectorizer::tokenize;

/// The lexicon shipped with the crate, one `token<TAB>±1` per line.
pub const DEFAULT_LEXICON: &str = include_str!("../fixtures/lexicon.tsv");

#[derive(Debug, Error)]
pub enum SentimentError {
    #[error("sentiment component `{name}` = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error("no external scorer was registered")]
    ExternalUnavailable,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Positive probability, negative probability and confidence, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SentimentScore {
    pub positive: f64,
    pub negative: f64,
    pub confidence: f64,
}

impl SentimentScore {
    pub fn new(positive: f64, negative: f64, confidence: f64) -> Result<Self, SentimentError> {
        let score = Self {
            positive,
            negative,
            confidence,
        };
        score.validate()?;
        Ok(score)
    }

    fn validate(&self) -> Result<(), SentimentError> {
        for (name, value) in [
            ("positive", self.positive),
            ("negative", self.negative),
            ("confidence", self.confidence),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SentimentError::OutOfRange { name, value });
            }
        }
        Ok(())
    }
}

/// `(P - N) * C`; below zero is a negative atmosphere.
pub fn atmosphere_value(score: SentimentScore) -> Result<f64, SentimentError> {
    score.validate()?;
    Ok((score.positive - score.negative) * score.confidence)
}

/// The window's ten values, oldest first.
pub fn atmosphere_vector(window: &AtmosphereWindow) -> [f64; ATMOSPHERE_SLOTS] {
    *window.values()
}

pub trait SentimentScorer: Send + Sync {
    fn score(&self, text: &str) -> SentimentScore;
}

impl fmt::Debug for dyn SentimentScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SentimentScorer")
    }
}

pub fn score_text(scorer: &dyn SentimentScorer, text: &str) -> SentimentScore {
    scorer.score(text)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    polarity: HashMap<String, i8>,
}

impl Lexicon {
    pub fn parse(source: &str) -> Result<Self, SentimentError> {
        let mut polarity = HashMap::new();
        for (idx, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| SentimentError::Lexicon {
                line: idx + 1,
                reason: reason.to_owned(),
            };
            let (token, value) = line.split_once('\t').ok_or_else(|| err("expected a tab"))?;
            let value: i8 = match value.trim() {
                "+1" | "1" => 1,
                "-1" => -1,
                _ => return Err(err("polarity must be +1 or -1")),
            };
            let token = token.trim();
            if token.is_empty() || token.to_lowercase() != token {
                return Err(err("tokens must be nonempty and lowercase"));
            }
            if polarity.insert(token.to_owned(), value).is_some() {
                return Err(err("duplicate token"));
            }
        }
        Ok(Self { polarity })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SentimentError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn polarity(&self, token: &str) -> Option<i8> {
        self.polarity.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.polarity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polarity.is_empty()
    }

    pub fn words(&self, polarity: i8) -> impl Iterator<Item = &str> {
        self.polarity
            .iter()
            .filter(move |(_, p)| **p == polarity)
            .map(|(w, _)| w.as_str())
    }
}

impl Default for LexiconScorer {
    fn default() -> Self {
        Self::new(Lexicon::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid"))
    }
}

/// `P = p/t`, `N = n/t`, `C = (p+n)/t` over the tokens of the text.
#[derive(Debug, Clone)]
pub struct LexiconScorer {
    lexicon: Lexicon,
}

impl LexiconScorer {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }
}

impl SentimentScorer for LexiconScorer {
    fn score(&self, text: &str) -> SentimentScore {
        let tokens = tokenize(text);
        let (mut pos, mut neg) = (0usize, 0usize);
        for t in &tokens {
            match self.lexicon.polarity(t) {
                Some(1) => pos += 1,
                Some(-1) => neg += 1,
                _ => {}
            }
        }
        let t = tokens.len().max(1) as f64;
        SentimentScore {
            positive: pos as f64 / t,
            negative: neg as f64 / t,
            confidence: (pos + neg) as f64 / t,
        }
    }
}

/// Returns the same score for every text.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub SentimentScore);

impl SentimentScorer for ConstantScorer {
    fn score(&self, _text: &str) -> SentimentScore {
        self.0
    }
}

/// Value of the `sentiment.scorer` configuration key.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scorer")]
pub enum ScorerConfig {
    #[default]
    Lexicon,
    /// Lexicon loaded from a file instead of the bundled one.
    LexiconFile { path: String },
    Constant {
        positive: f64,
        negative: f64,
        confidence: f64,
    },
    /// Supplied by the embedding application at room construction.
    External,
}

impl ScorerConfig {
    pub fn build(
        &self,
        external: Option<Arc<dyn SentimentScorer>>,
    ) -> Result<Arc<dyn SentimentScorer>, SentimentError> {
        Ok(match self {
            Self::Lexicon => Arc::new(LexiconScorer::default()),
            Self::LexiconFile { path } => Arc::new(LexiconScorer::new(Lexicon::load(path)?)),
            Self::Constant {
                positive,
                negative,
                confidence,
            } => Arc::new(ConstantScorer(SentimentScore::new(
                *positive,
                *negative,
                *confidence,
            )?)),
            Self::External => external.ok_or(SentimentError::ExternalUnavailable)?,
        })
    }
}
