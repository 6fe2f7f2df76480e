//! Training data from simulated rooms, labeled by a synthetic admin.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{simulate, ScenarioConfig, SimError};
use crate::matrix::{FeatureVector, MatrixKind};
use crate::ttransformer::{quantize_features, LabeledSample};

/// The allocator whose decisions become labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    Heuristic,
    Rule,
}

impl Oracle {
    fn matrix(self, cfg: &ScenarioConfig) -> MatrixKind {
        match self {
            Oracle::Heuristic => MatrixKind::Heuristic(cfg.heuristic.clone()),
            Oracle::Rule => MatrixKind::Rule(cfg.rule.clone()),
        }
    }
}

/// Single-precision copy of a feature vector, as stored in dataset files.
pub fn quantize(features: &FeatureVector) -> FeatureVector {
    quantize_features(features)
}

/// Runs `cfg` under the oracle on seeds `cfg.seed, cfg.seed + 1, …` and
/// turns each accepted action into one sample: the `seq_len` feature rows the
/// allocator saw, labeled with the budget it assigned. Stops at exactly `n`.
pub fn generate_dataset(
    cfg: &ScenarioConfig,
    oracle: Oracle,
    n: usize,
    seq_len: usize,
) -> Result<Vec<LabeledSample>, SimError> {
    if n == 0 || seq_len == 0 {
        return Err(SimError::ConfigInvalid("n and seq_len must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut seed = cfg.seed;
    while samples.len() < n {
        // keyed by address; holding the original keeps the address unique
        let mut shared: HashMap<usize, (Arc<FeatureVector>, Arc<FeatureVector>)> = HashMap::new();
        let zero = Arc::new(FeatureVector::zeros());
        let before = samples.len();
        let run = cfg.with_seed(seed);
        simulate(&run, oracle.matrix(&run), &mut |step| {
            if samples.len() >= n || !step.outcome.accepted {
                return;
            }
            let Some(decision) = &step.outcome.decision else {
                return;
            };
            let Some(sequence) = step.room.last_sequence(seq_len) else {
                return;
            };
            let sequence = sequence
                .into_iter()
                .map(|f| {
                    if f.as_slice().iter().all(|v| *v == 0.0) {
                        return Arc::clone(&zero);
                    }
                    let key = Arc::as_ptr(&f) as usize;
                    let entry = shared
                        .entry(key)
                        .or_insert_with(|| (Arc::clone(&f), Arc::new(quantize(&f))));
                    Arc::clone(&entry.1)
                })
                .collect();
            samples.push(LabeledSample {
                sequence,
                label: decision.new_budget,
            });
        })?;
        if samples.len() == before {
            return Err(SimError::ConfigInvalid(format!(
                "scenario `{}` produced no accepted actions",
                cfg.name
            )));
        }
        seed = seed.wrapping_add(1);
    }
    Ok(samples)
}
