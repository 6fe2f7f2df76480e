use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{positional_encoding, Block, BlockCache, LayerSettings, Linear};
use super::ModelError;

/// Shape and regularization hyperparameters of the temporal transformer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub layernorm_eps: f64,
    pub seq_len: usize,
}

impl ModelConfig {
    /// Small profile that trains on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            input_dim: crate::matrix::FEATURE_DIM,
            model_dim: 64,
            heads: 8,
            ff_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.0,
            layernorm_eps: 1e-5,
            seq_len: 16,
        }
    }

    /// Full-size hyperparameters: 8 heads, 6 + 6 layers, dropout 0.1,
    /// layer-norm epsilon 1e-5 and a 2048-wide feed-forward.
    pub fn paper() -> Self {
        Self {
            input_dim: crate::matrix::FEATURE_DIM,
            model_dim: 512,
            heads: 8,
            ff_dim: 2048,
            encoder_layers: 6,
            decoder_layers: 6,
            dropout: 0.1,
            layernorm_eps: 1e-5,
            seq_len: 16,
        }
    }

    /// Tiny profile used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_dim: crate::matrix::FEATURE_DIM,
            model_dim: 8,
            heads: 2,
            ff_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
            layernorm_eps: 1e-5,
            seq_len: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.input_dim,
            self.model_dim,
            self.heads,
            self.ff_dim,
            self.seq_len,
        ];
        if dims.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be >= 1".into(),
            ));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 == 1 {
            return Err(ModelError::OddDim(self.model_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(
                "dropout must be in [0, 1)".into(),
            ));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(ModelError::InvalidConfig(
                "layernorm_eps must be > 0".into(),
            ));
        }
        Ok(())
    }

    fn settings(&self, training: bool) -> LayerSettings {
        LayerSettings {
            heads: self.heads,
            eps: self.layernorm_eps,
            dropout: if training { self.dropout } else { 0.0 },
        }
    }
}

/// All trainable parameters. Gradients use the same struct.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub input: Linear,
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
    pub head: Linear,
}

impl ModelWeights {
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, ff) = (config.model_dim, config.ff_dim);
        Ok(Self {
            config,
            input: Linear::zeros(config.input_dim, d),
            encoder: (0..config.encoder_layers)
                .map(|_| Block::zeros(d, ff))
                .collect(),
            decoder: (0..config.decoder_layers)
                .map(|_| Block::zeros(d, ff))
                .collect(),
            head: Linear::zeros(d, 1),
        })
    }

    /// Seeded Xavier-uniform weights, zero biases, unit layer-norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff) = (config.model_dim, config.ff_dim);
        let input = Linear::xavier(config.input_dim, d, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|_| Block::xavier(d, ff, &mut rng))
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| Block::xavier(d, ff, &mut rng))
            .collect();
        let head = Linear::xavier(d, 1, &mut rng);
        Ok(Self {
            config,
            input,
            encoder,
            decoder,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.fill(0.0));
        z
    }

    /// Visits every tensor in the declared (serialization) order.
    pub fn for_each_tensor<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        fn linear<F: FnMut(&str, &[f64])>(f: &mut F, name: &str, l: &Linear) {
            f(
                &format!("{name}.w"),
                l.w.as_slice().expect("standard layout"),
            );
            f(
                &format!("{name}.b"),
                l.b.as_slice().expect("standard layout"),
            );
        }
        fn block<F: FnMut(&str, &[f64])>(f: &mut F, name: &str, b: &Block) {
            linear(f, &format!("{name}.attn.q"), &b.attention.query);
            linear(f, &format!("{name}.attn.k"), &b.attention.key);
            linear(f, &format!("{name}.attn.v"), &b.attention.value);
            linear(f, &format!("{name}.attn.o"), &b.attention.output);
            f(
                &format!("{name}.norm1.gamma"),
                b.norm1.gamma.as_slice().unwrap(),
            );
            f(
                &format!("{name}.norm1.beta"),
                b.norm1.beta.as_slice().unwrap(),
            );
            linear(f, &format!("{name}.ff.inner"), &b.feed_forward.inner);
            linear(f, &format!("{name}.ff.outer"), &b.feed_forward.outer);
            f(
                &format!("{name}.norm2.gamma"),
                b.norm2.gamma.as_slice().unwrap(),
            );
            f(
                &format!("{name}.norm2.beta"),
                b.norm2.beta.as_slice().unwrap(),
            );
        }
        linear(&mut f, "input", &self.input);
        for (i, b) in self.encoder.iter().enumerate() {
            block(&mut f, &format!("encoder.{i}"), b);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            block(&mut f, &format!("decoder.{i}"), b);
        }
        linear(&mut f, "head", &self.head);
    }

    pub fn for_each_tensor_mut<F: FnMut(&str, &mut [f64])>(&mut self, mut f: F) {
        fn linear<F: FnMut(&str, &mut [f64])>(f: &mut F, name: &str, l: &mut Linear) {
            f(
                &format!("{name}.w"),
                l.w.as_slice_mut().expect("standard layout"),
            );
            f(
                &format!("{name}.b"),
                l.b.as_slice_mut().expect("standard layout"),
            );
        }
        fn block<F: FnMut(&str, &mut [f64])>(f: &mut F, name: &str, b: &mut Block) {
            linear(f, &format!("{name}.attn.q"), &mut b.attention.query);
            linear(f, &format!("{name}.attn.k"), &mut b.attention.key);
            linear(f, &format!("{name}.attn.v"), &mut b.attention.value);
            linear(f, &format!("{name}.attn.o"), &mut b.attention.output);
            f(
                &format!("{name}.norm1.gamma"),
                b.norm1.gamma.as_slice_mut().unwrap(),
            );
            f(
                &format!("{name}.norm1.beta"),
                b.norm1.beta.as_slice_mut().unwrap(),
            );
            linear(f, &format!("{name}.ff.inner"), &mut b.feed_forward.inner);
            linear(f, &format!("{name}.ff.outer"), &mut b.feed_forward.outer);
            f(
                &format!("{name}.norm2.gamma"),
                b.norm2.gamma.as_slice_mut().unwrap(),
            );
            f(
                &format!("{name}.norm2.beta"),
                b.norm2.beta.as_slice_mut().unwrap(),
            );
        }
        linear(&mut f, "input", &mut self.input);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            block(&mut f, &format!("encoder.{i}"), b);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            block(&mut f, &format!("decoder.{i}"), b);
        }
        linear(&mut f, "head", &mut self.head);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// Flattened copy of every parameter in declared order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.for_each_tensor(|_, t| out.extend_from_slice(t));
        out
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// `self -= lr * grad`
    pub fn sgd_step(&mut self, grad: &ModelWeights, lr: f64) {
        let flat = grad.flat();
        let mut offset = 0;
        self.for_each_tensor_mut(|_, t| {
            let n = t.len();
            for (p, g) in t.iter_mut().zip(&flat[offset..offset + n]) {
                *p -= lr * g;
            }
            offset += n;
        });
    }

    fn check_sequence<R: AsRef<[f64]>>(&self, sequence: &[R]) -> Result<Array2<f64>, ModelError> {
        let cfg = &self.config;
        if sequence.len() != cfg.seq_len {
            return Err(ModelError::ShapeMismatch(format!(
                "sequence length {} != seq_len {}",
                sequence.len(),
                cfg.seq_len
            )));
        }
        let mut x = Array2::zeros((cfg.seq_len, cfg.input_dim));
        for (t, row) in sequence.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cfg.input_dim {
                return Err(ModelError::ShapeMismatch(format!(
                    "step {t} has {} features, expected {}",
                    row.len(),
                    cfg.input_dim
                )));
            }
            x.row_mut(t).assign(&ndarray::ArrayView1::from(row));
        }
        Ok(x)
    }

    /// Inference: dropout disabled, pure in `(weights, sequence)`.
    pub fn forward<R: AsRef<[f64]>>(&self, sequence: &[R]) -> Result<f64, ModelError> {
        if !self.all_finite() {
            return Err(ModelError::NonFiniteWeights);
        }
        let x = self.check_sequence(sequence)?;
        let pe = self.positional_encoding()?;
        Ok(self.run(x, &pe, None)?.0)
    }

    /// Predictions for many sequences; weights are checked once.
    pub fn predict_all<'a, I>(&self, sequences: I) -> Result<Vec<f64>, ModelError>
    where
        I: IntoIterator<Item = Vec<&'a [f64]>>,
    {
        if !self.all_finite() {
            return Err(ModelError::NonFiniteWeights);
        }
        let pe = self.positional_encoding()?;
        sequences
            .into_iter()
            .map(|seq| Ok(self.run(self.check_sequence(&seq)?, &pe, None)?.0))
            .collect()
    }

    fn positional_encoding(&self) -> Result<Array2<f64>, ModelError> {
        positional_encoding(self.config.seq_len, self.config.model_dim)
    }

    fn run(
        &self,
        x: Array2<f64>,
        pe: &Array2<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ForwardCache), ModelError> {
        let cfg = &self.config;
        let settings = cfg.settings(rng.is_some());
        let embedded = self.input.forward(&x.view()) + pe;

        let mut h = embedded.clone();
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (out, cache) = block.forward(h, None, settings, rng.as_deref_mut())?;
            encoder.push(cache);
            h = out;
        }
        let memory = h;

        // The decoder's query is the most recent (embedded) step.
        let last = cfg.seq_len - 1;
        let mut q = embedded.slice(s![last..last + 1, ..]).to_owned();
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            let (out, cache) = block.forward(q, Some(&memory), settings, rng.as_deref_mut())?;
            decoder.push(cache);
            q = out;
        }
        let y = self.head.forward(&q.view())[[0, 0]];
        Ok((
            y,
            ForwardCache {
                x,
                memory,
                query: q,
                encoder,
                decoder,
            },
        ))
    }

    /// Forward + backward for one sample; accumulates `d_loss/d_y` times the
    /// parameter Jacobian into `grad` and returns the prediction.
    pub(crate) fn accumulate_gradient(
        &self,
        x: Array2<f64>,
        pe: &Array2<f64>,
        dloss_dy: impl FnOnce(f64) -> f64,
        grad: &mut ModelWeights,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        let (y, cache) = self.run(x, pe, rng)?;
        let dy = dloss_dy(y);
        let dy_arr = Array2::from_elem((1, 1), dy);
        let mut dq = self
            .head
            .backward(&cache.query.view(), &dy_arr.view(), &mut grad.head, true)
            .expect("input grad requested");

        let mut dmemory = Array2::zeros(cache.memory.raw_dim());
        for ((block, bcache), g) in self
            .decoder
            .iter()
            .zip(&cache.decoder)
            .zip(grad.decoder.iter_mut())
            .rev()
        {
            let (dx, dmem) = block.backward(&dq.view(), Some(&cache.memory), bcache, g);
            dq = dx;
            dmemory += &dmem.expect("cross attention yields memory grad");
        }

        let mut dh = dmemory;
        for ((block, bcache), g) in self
            .encoder
            .iter()
            .zip(&cache.encoder)
            .zip(grad.encoder.iter_mut())
            .rev()
        {
            dh = block.backward(&dh.view(), None, bcache, g).0;
        }
        let last = self.config.seq_len - 1;
        dh.row_mut(last).scaled_add(1.0, &dq.index_axis(Axis(0), 0));
        self.input
            .backward(&cache.x.view(), &dh.view(), &mut grad.input, false);
        Ok(y)
    }

    pub(crate) fn sequence_matrix<R: AsRef<[f64]>>(
        &self,
        sequence: &[R],
    ) -> Result<Array2<f64>, ModelError> {
        self.check_sequence(sequence)
    }
}

struct ForwardCache {
    x: Array2<f64>,
    memory: Array2<f64>,
    query: Array2<f64>,
    encoder: Vec<BlockCache>,
    decoder: Vec<BlockCache>,
}

/// A training pair: `seq_len` feature rows (zero-padded at the front) and
/// the target budget.
pub trait Sample {
    fn steps(&self) -> Vec<&[f64]>;
    fn label(&self) -> f64;
}

/// Exact gradient of the mean squared error over `batch`.
pub fn gradients<S: Sample>(
    weights: &ModelWeights,
    batch: &[S],
) -> Result<(ModelWeights, f64), ModelError> {
    batch_gradients(weights, batch.iter(), batch.len(), None)
}

pub(crate) fn batch_gradients<'a, S: Sample + 'a>(
    weights: &ModelWeights,
    batch: impl Iterator<Item = &'a S>,
    batch_len: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(ModelWeights, f64), ModelError> {
    if batch_len == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let mut grad = weights.zeros_like();
    let scale = 2.0 / batch_len as f64;
    let mut loss = 0.0;
    let pe = weights.positional_encoding()?;
    for sample in batch {
        let x = weights.sequence_matrix(&sample.steps())?;
        let label = sample.label();
        let y = weights.accumulate_gradient(
            x,
            &pe,
            |y| scale * (y - label),
            &mut grad,
            rng.as_deref_mut(),
        )?;
        loss += (y - label).powi(2);
    }
    Ok((grad, loss / batch_len as f64))
}
