//! Temporal transformer regression model with manual backpropagation.
//!
//! Layout: learned input projection (`input_dim → d`), sinusoidal positional
//! encoding, a stack of post-norm self-attention encoder blocks, and a
//! decoder stack whose single query row is the most recent embedded step
//! attending over the encoder output. A linear head maps the final query to
//! the predicted budget.
//!
//! Training is plain minibatch SGD on mean squared error with early stopping
//! on a held-out split. Everything is `f64` and single-threaded, so a given
//! seed reproduces the loss history bit for bit.

mod io;
mod layers;
mod model;
mod train;

use thiserror::Error;

pub use io::{
    decode_weights, encode_weights, load_weights, load_weights_for, parse_sample,
    quantize_features, read_dataset, save_weights, write_dataset, write_sample, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};
pub use layers::{
    multi_head_attention, normalize_rows, positional_encoding, softmax_rows, Attention,
    AttentionOutput, Block, FeedForward, LayerNorm, Linear,
};
pub use model::{gradients, ModelConfig, ModelWeights, Sample};
pub use train::{
    mse, split_indices, train, EarlyStopping, EpochStats, LabeledSample, StopDecision, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("positional encoding needs an even model dimension, got {0}")]
    OddDim(usize),
    #[error("weights contain NaN or infinity")]
    NonFiniteWeights,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("weight file checksum mismatch")]
    ChecksumMismatch,
    #[error("not a weight file")]
    BadMagic,
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("dataset line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result of a finite-difference comparison over every parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(tensor name, max relative error, parameters checked)`
    pub tensors: Vec<(String, f64, usize)>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.1).fold(0.0, f64::max)
    }
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences (`eps`) on every scalar parameter of `weights`,
/// compared with [`gradients`]. Meant for small configs.
pub fn gradient_check<S: Sample>(
    weights: &ModelWeights,
    batch: &[S],
    eps: f64,
) -> Result<GradCheckReport, ModelError> {
    let (analytic, _) = gradients(weights, batch)?;
    let analytic = analytic.flat();
    let loss = |w: &ModelWeights| -> Result<f64, ModelError> {
        let mut total = 0.0;
        for s in batch {
            total += (w.forward(&s.steps())? - s.label()).powi(2);
        }
        Ok(total / batch.len() as f64)
    };

    let mut names = Vec::new();
    weights.for_each_tensor(|name, t| names.push((name.to_owned(), t.len())));
    let mut probe = weights.clone();
    let mut tensors = Vec::with_capacity(names.len());
    let mut offset = 0;
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..len {
            let original = weights.flat_get(ti, j);
            probe.flat_set(ti, j, original + eps);
            let plus = loss(&probe)?;
            probe.flat_set(ti, j, original - eps);
            let minus = loss(&probe)?;
            probe.flat_set(ti, j, original);
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[offset + j], numeric));
        }
        offset += len;
        tensors.push((name, worst, len));
    }
    Ok(GradCheckReport { tensors })
}

/// The standard check: tiny config, `batch` random samples in `[-1, 1]`,
/// random labels, step `eps`.
pub fn tiny_gradient_check(
    seed: u64,
    batch: usize,
    eps: f64,
) -> Result<GradCheckReport, ModelError> {
    use rand::{Rng, SeedableRng};
    let config = ModelConfig::tiny();
    let weights = ModelWeights::init(config, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let samples: Vec<LabeledSample> = (0..batch)
        .map(|_| {
            let sequence = (0..config.seq_len)
                .map(|_| {
                    let v = (0..config.input_dim)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    std::sync::Arc::new(
                        crate::matrix::FeatureVector::from_vec(v).expect("feature width"),
                    )
                })
                .collect();
            LabeledSample {
                sequence,
                label: rng.random_range(0.0..5.0),
            }
        })
        .collect();
    gradient_check(&weights, &samples, eps)
}

impl ModelWeights {
    fn flat_get(&self, tensor: usize, index: usize) -> f64 {
        let mut i = 0;
        let mut out = 0.0;
        self.for_each_tensor(|_, t| {
            if i == tensor {
                out = t[index];
            }
            i += 1;
        });
        out
    }

    fn flat_set(&mut self, tensor: usize, index: usize, value: f64) {
        let mut i = 0;
        self.for_each_tensor_mut(|_, t| {
            if i == tensor {
                t[index] = value;
            }
            i += 1;
        });
    }
}
