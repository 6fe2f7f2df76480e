//! Layers with hand-written backward passes.
//!
//! Every `forward` returns its output together with a cache; `backward`
//! consumes that cache, accumulates parameter gradients into a same-shaped
//! gradient struct and returns the gradient with respect to its input.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn xavier(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((inputs, outputs), || rng.random_range(-bound..bound));
        Self {
            w,
            b: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
        grad: &mut Linear,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        need_input_grad.then(|| dy.dot(&self.w.t()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>, eps: f64) -> (Array2<f64>, LayerNormCache) {
        let (xhat, inv_std) = normalize_rows(x, eps);
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        dy: &ArrayView2<f64>,
        cache: &LayerNormCache,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let n = dxhat.ncols() as f64;
        let mut dx = Array2::zeros(dxhat.raw_dim());
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / n;
            let mean_gx = g.dot(&xh) / n;
            let inv = cache.inv_std[i];
            for j in 0..row.len() {
                row[j] = inv * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }
}

/// Per-row `(x - mean) / sqrt(var + eps)`, with the population variance.
pub fn normalize_rows(x: &ArrayView2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std[i] = inv;
    }
    (xhat, inv_std)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Output of [`multi_head_attention`]: concatenated head outputs and the
/// per-head attention weights (`Tq × Tk` each).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
}

/// `softmax(Q_h K_hᵀ / sqrt(d_k)) V_h` for every head, concatenated along
/// columns. No projections are applied here.
pub fn multi_head_attention(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    heads: usize,
) -> Result<AttentionOutput, ModelError> {
    let d = q.ncols();
    if heads == 0
        || !d.is_multiple_of(heads)
        || k.ncols() != d
        || v.ncols() != d
        || k.nrows() != v.nrows()
    {
        return Err(ModelError::ShapeMismatch(format!(
            "attention q {:?}, k {:?}, v {:?}, heads {heads}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut output = Array2::zeros((q.nrows(), d));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let probs = softmax_rows(&scores);
        output.slice_mut(cols).assign(&probs.dot(&v.slice(cols)));
        weights.push(probs);
    }
    Ok(AttentionOutput { output, weights })
}

/// Projected multi-head attention: `q, k, v` projections and an output
/// projection around [`multi_head_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl Attention {
    pub fn zeros(d: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }

    pub fn xavier(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: Linear::xavier(d, d, rng),
            key: Linear::xavier(d, d, rng),
            value: Linear::xavier(d, d, rng),
            output: Linear::xavier(d, d, rng),
        }
    }

    pub fn forward(
        &self,
        xq: &ArrayView2<f64>,
        xkv: &ArrayView2<f64>,
        heads: usize,
    ) -> Result<(Array2<f64>, AttentionCache), ModelError> {
        let q = self.query.forward(xq);
        let k = self.key.forward(xkv);
        let v = self.value.forward(xkv);
        let AttentionOutput { output, weights } =
            multi_head_attention(&q.view(), &k.view(), &v.view(), heads)?;
        let out = self.output.forward(&output.view());
        Ok((
            out,
            AttentionCache {
                q,
                k,
                v,
                probs: weights,
                concat: output,
            },
        ))
    }

    /// Returns `(d_xq, d_xkv)`.
    pub fn backward(
        &self,
        xq: &ArrayView2<f64>,
        xkv: &ArrayView2<f64>,
        dout: &ArrayView2<f64>,
        cache: &AttentionCache,
        grad: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        let dconcat = self
            .output
            .backward(&cache.concat.view(), dout, &mut grad.output, true)
            .expect("input grad requested");
        let heads = cache.probs.len();
        let d = dconcat.ncols();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dkm = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, probs) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let dout_h = dconcat.slice(cols);
            let dprobs = dout_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dout_h));
            // softmax backward, row by row
            let mut dscores = probs * &dprobs;
            for (mut ds_row, p_row) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                let total = ds_row.sum();
                for (ds, p) in ds_row.iter_mut().zip(p_row.iter()) {
                    *ds -= p * total;
                }
            }
            dscores *= scale;
            dq.slice_mut(cols)
                .assign(&dscores.dot(&cache.k.slice(cols)));
            dkm.slice_mut(cols)
                .assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let dxq = self
            .query
            .backward(xq, &dq.view(), &mut grad.query, true)
            .expect("input grad requested");
        let mut dxkv = self
            .key
            .backward(xkv, &dkm.view(), &mut grad.key, true)
            .expect("input grad requested");
        dxkv += &self
            .value
            .backward(xkv, &dv.view(), &mut grad.value, true)
            .expect("input grad requested");
        (dxq, dxkv)
    }
}

/// Two linear maps with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

pub struct FeedForwardCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            inner: Linear::zeros(d, hidden),
            outer: Linear::zeros(hidden, d),
        }
    }

    pub fn xavier(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::xavier(d, hidden, rng),
            outer: Linear::xavier(hidden, d, rng),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.inner.forward(x);
        let act = pre.mapv(|v| v.max(0.0));
        let y = self.outer.forward(&act.view());
        (y, FeedForwardCache { pre, act })
    }

    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
        cache: &FeedForwardCache,
        grad: &mut FeedForward,
    ) -> Array2<f64> {
        let mut dact = self
            .outer
            .backward(&cache.act.view(), dy, &mut grad.outer, true)
            .expect("input grad requested");
        dact.zip_mut_with(&cache.pre, |g, p| {
            if *p <= 0.0 {
                *g = 0.0;
            }
        });
        self.inner
            .backward(x, &dact.view(), &mut grad.inner, true)
            .expect("input grad requested")
    }
}

/// Inverted dropout. `None` when disabled.
pub fn dropout_mask(
    shape: (usize, usize),
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

/// Shared hyperparameters threaded through a forward pass.
#[derive(Clone, Copy)]
pub struct LayerSettings {
    pub heads: usize,
    pub eps: f64,
    pub dropout: f64,
}

/// Post-norm residual block: attention, then feed-forward.
///
/// Encoder layers attend over their own input; decoder layers attend from
/// the query rows over the encoder memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attention: Attention,
    pub norm1: LayerNorm,
    pub feed_forward: FeedForward,
    pub norm2: LayerNorm,
}

pub struct BlockCache {
    x: Array2<f64>,
    attn: AttentionCache,
    mask1: Option<Array2<f64>>,
    norm1: LayerNormCache,
    u: Array2<f64>,
    ff: FeedForwardCache,
    mask2: Option<Array2<f64>>,
    norm2: LayerNormCache,
}

impl Block {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            attention: Attention::zeros(d),
            norm1: LayerNorm::zeros(d),
            feed_forward: FeedForward::zeros(d, hidden),
            norm2: LayerNorm::zeros(d),
        }
    }

    pub fn xavier(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attention: Attention::xavier(d, rng),
            norm1: LayerNorm::new(d),
            feed_forward: FeedForward::xavier(d, hidden, rng),
            norm2: LayerNorm::new(d),
        }
    }

    /// `memory = None` means self-attention.
    pub fn forward(
        &self,
        x: Array2<f64>,
        memory: Option<&Array2<f64>>,
        settings: LayerSettings,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, BlockCache), ModelError> {
        let kv = memory.unwrap_or(&x).view();
        let (a, attn) = self.attention.forward(&x.view(), &kv, settings.heads)?;
        let mask1 = dropout_mask(a.dim(), settings.dropout, rng.as_deref_mut());
        let r1 = &x + &apply_mask(a, &mask1);
        let (u, norm1) = self.norm1.forward(&r1.view(), settings.eps);
        let (f, ff) = self.feed_forward.forward(&u.view());
        let mask2 = dropout_mask(f.dim(), settings.dropout, rng);
        let r2 = &u + &apply_mask(f, &mask2);
        let (y, norm2) = self.norm2.forward(&r2.view(), settings.eps);
        Ok((
            y,
            BlockCache {
                x,
                attn,
                mask1,
                norm1,
                u,
                ff,
                mask2,
                norm2,
            },
        ))
    }

    /// Returns `(d_x, d_memory)`; `d_memory` is `None` for self-attention,
    /// where both paths are folded into `d_x`.
    pub fn backward(
        &self,
        dy: &ArrayView2<f64>,
        memory: Option<&Array2<f64>>,
        cache: &BlockCache,
        grad: &mut Block,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let dr2 = self.norm2.backward(dy, &cache.norm2, &mut grad.norm2);
        let df = apply_mask(dr2.clone(), &cache.mask2);
        let mut du = dr2;
        du += &self.feed_forward.backward(
            &cache.u.view(),
            &df.view(),
            &cache.ff,
            &mut grad.feed_forward,
        );
        let dr1 = self
            .norm1
            .backward(&du.view(), &cache.norm1, &mut grad.norm1);
        let da = apply_mask(dr1.clone(), &cache.mask1);
        let kv = memory.unwrap_or(&cache.x).view();
        let (dxq, dxkv) = self.attention.backward(
            &cache.x.view(),
            &kv,
            &da.view(),
            &cache.attn,
            &mut grad.attention,
        );
        let mut dx = dr1;
        dx += &dxq;
        match memory {
            Some(_) => (dx, Some(dxkv)),
            None => {
                dx += &dxkv;
                (dx, None)
            }
        }
    }
}

/// Sinusoidal encoding: `PE[t, 2i] = sin(t / 10000^(2i/d))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Array2<f64>, ModelError> {
    if d % 2 == 1 {
        return Err(ModelError::OddDim(d));
    }
    if len == 0 || d == 0 {
        return Err(ModelError::InvalidConfig(
            "positional encoding needs T, d >= 1".into(),
        ));
    }
    let mut pe = Array2::zeros((len, d));
    for t in 0..len {
        for i in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[t, 2 * i]] = angle.sin();
            pe[[t, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}
