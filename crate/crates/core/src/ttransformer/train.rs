use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_gradients, ModelWeights, Sample};
use super::ModelError;
use crate::matrix::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Relative drop in test loss that counts as an improvement.
    #[serde(default)]
    pub min_improvement: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            min_improvement: 0.05,
            seed: 0,
            test_fraction: 0.2,
        }
    }

    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-5,
            max_epochs: 200,
            min_improvement: 0.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "patience and batch_size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.min_improvement) {
            return Err(ModelError::InvalidConfig(
                "min_improvement must be in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ModelError::InvalidConfig(
                "test_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// `seq_len` feature rows and the budget the allocator should assign.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sequence: Vec<Arc<FeatureVector>>,
    pub label: f64,
}

impl Sample for LabeledSample {
    fn steps(&self) -> Vec<&[f64]> {
        self.sequence.iter().map(|f| f.as_slice()).collect()
    }

    fn label(&self) -> f64 {
        self.label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the best epoch by test loss.
    pub weights: ModelWeights,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub initial_train_mse: f64,
    pub initial_test_mse: f64,
    pub stopped_early: bool,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochStats {
        &self.history[self.best_epoch - 1]
    }
}

/// Tracks the best test loss; signals a stop after `patience` epochs
/// without beating it by the relative margin `min_improvement`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_improvement: f64,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self::with_margin(patience, 0.0)
    }

    pub fn with_margin(patience: usize, min_improvement: f64) -> Self {
        Self {
            patience,
            min_improvement,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best * (1.0 - self.min_improvement) {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Mean squared error, summed in slice order.
pub fn mse<S: Sample>(weights: &ModelWeights, samples: &[&S]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let predictions = weights.predict_all(samples.iter().map(|s| s.steps()))?;
    let mut total = 0.0;
    for (y, s) in predictions.iter().zip(samples) {
        total += (y - s.label()).powi(2);
    }
    Ok(total / samples.len() as f64)
}

/// Seeded shuffle into `(train, test)` index lists. With a single sample the
/// test split reuses it.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n < 2 {
        return (idx.clone(), idx);
    }
    let test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let train = idx.split_off(test);
    (train, idx)
}

/// Minibatch SGD on MSE with early stopping on the held-out split.
pub fn train<S: Sample>(
    mut weights: ModelWeights,
    cfg: &TrainConfig,
    dataset: &[S],
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    weights.config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let (train_idx, test_idx) = split_indices(dataset.len(), cfg.test_fraction, cfg.seed);
    let train_set: Vec<&S> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let test_set: Vec<&S> = test_idx.iter().map(|&i| &dataset[i]).collect();

    let initial_train_mse = mse(&weights, &train_set)?;
    let initial_test_mse = mse(&weights, &test_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::with_margin(cfg.patience, cfg.min_improvement);
    let mut best_weights = weights.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk.iter().map(|&i| train_set[i]);
            let (grad, _) = batch_gradients(&weights, batch, chunk.len(), Some(&mut rng))?;
            weights.sgd_step(&grad, cfg.learning_rate);
        }
        if !weights.all_finite() {
            return Err(ModelError::NonFiniteWeights);
        }
        let stats = EpochStats {
            epoch,
            train_mse: mse(&weights, &train_set)?,
            test_mse: mse(&weights, &test_set)?,
        };
        log::debug!(
            "epoch {epoch}: train {:.6} test {:.6}",
            stats.train_mse,
            stats.test_mse
        );
        history.push(stats);
        match stopper.observe(epoch, stats.test_mse) {
            StopDecision::Improved => best_weights = weights.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        weights: best_weights,
        history,
        best_epoch: stopper.best_epoch(),
        initial_train_mse,
        initial_test_mse,
        stopped_early,
        train_indices: train_idx,
        test_indices: test_idx,
    })
}
