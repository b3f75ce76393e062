//! Pre-norm Transformer encoder with an explicit backward pass.
//!
//! Each block computes
//! `x += Wo·Att(LN1(x))` then `x += W2·GELU(W1·LN2(x))`, and the encoder
//! output `H^K` is the final layer-normed state. Attention is
//! `softmax(QKᵀ/√d_model)·V` per head; dropout applies to attention weights
//! and FFN activations in training mode only.
//!
//! All arithmetic is `f64`; checkpoints store `f32`.

mod checkpoint;
mod params;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::TokenSequence;
use crate::error::{Error, Result};

pub use checkpoint::{fingerprint, Checkpoint};
pub use params::{LayerParams, Params};

/// Random stream used for dropout and sampling during training.
pub type TrainRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            other => Err(format!("unknown pooling `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub pooling: Pooling,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            n_layers: 4,
            ffn_dim: 1024,
            max_len: 512,
            dropout: 0.4,
            vocab_size: 0,
            pooling: Pooling::Cls,
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_dim == 0 {
            return bad("all dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len < 4 {
            return bad("max_len must be at least 4".into());
        }
        if self.vocab_size <= crate::bpe::NUM_SPECIALS {
            return bad(format!("vocab_size {} leaves no room beyond specials", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0 && self.layer_norm_eps > 0.0) {
            return bad("init_std must be finite and non-negative, layer_norm_eps positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("model config", e.to_string()))
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A pooled document vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: Params,
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut TrainRng),
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head, before dropout.
    probs: Vec<Array2<f64>>,
    attn_drop: Vec<Option<Array2<f64>>>,
    context: Array2<f64>,
    ln2: NormCache,
    c: Array2<f64>,
    u: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    act: Array2<f64>,
}

/// Activations kept by [`EncoderModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<u32>,
    key_mask: Vec<bool>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
}

impl EncoderModel {
    /// Gaussian initialization (σ = `init_std`) of all weight matrices and
    /// embeddings; zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn check_input(&self, seq: &TokenSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        if seq.len() > self.config.max_len {
            return Err(Error::LengthExceeded { len: seq.len(), max_len: self.config.max_len });
        }
        if seq.attention_mask.len() != seq.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids but {} mask entries",
                seq.len(),
                seq.attention_mask.len()
            )));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::IdOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    /// Final-layer hidden states, `(len, d_model)`.
    pub fn encode(&self, seq: &TokenSequence, mode: Mode<'_>) -> Result<Array2<f64>> {
        Ok(self.forward(seq, mode)?.0)
    }

    /// Eval-mode encoding followed by pooling.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Embedding> {
        let hidden = self.encode(seq, Mode::Eval)?;
        pool(&hidden, &seq.attention_mask, self.config.pooling)
    }

    pub fn forward(&self, seq: &TokenSequence, mode: Mode<'_>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(seq)?;
        let cfg = &self.config;
        let n = seq.len();
        let p = &self.params;
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(rng) if cfg.dropout > 0.0 => Some(rng),
            Mode::Train(_) => None,
        };
        let key_mask: Vec<bool> = seq.attention_mask.iter().map(|&m| m == 1).collect();

        let mut x = Array2::<f64>::zeros((n, cfg.d_model));
        for (i, &id) in seq.ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &p.token_embedding.row(id as usize);
            row += &p.position_embedding.row(i);
        }

        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        let dh = cfg.head_dim();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lp in &p.layers {
            let (a, ln1) = layer_norm(&x, &lp.ln1_gamma, &lp.ln1_beta, cfg.layer_norm_eps);
            let q = a.dot(&lp.w_q) + &lp.b_q;
            let k = a.dot(&lp.w_k) + &lp.b_k;
            let v = a.dot(&lp.w_v) + &lp.b_v;
            let mut context = Array2::<f64>::zeros((n, cfg.d_model));
            let mut probs = Vec::with_capacity(cfg.n_heads);
            let mut attn_drop = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let weights = attention_weights(q.slice(cols), k.slice(cols), &key_mask, scale);
                let drop = rng.as_deref_mut().map(|r| dropout_mask(r, weights.dim(), cfg.dropout));
                let out = match &drop {
                    Some(m) => (&weights * m).dot(&v.slice(cols)),
                    None => weights.dot(&v.slice(cols)),
                };
                context.slice_mut(cols).assign(&out);
                probs.push(weights);
                attn_drop.push(drop);
            }
            x += &(context.dot(&lp.w_o) + &lp.b_o);

            let (c, ln2) = layer_norm(&x, &lp.ln2_gamma, &lp.ln2_beta, cfg.layer_norm_eps);
            let u = c.dot(&lp.w_ffn1) + &lp.b_ffn1;
            let mut act = u.mapv(gelu);
            let ffn_drop = rng.as_deref_mut().map(|r| dropout_mask(r, act.dim(), cfg.dropout));
            if let Some(m) = &ffn_drop {
                act *= m;
            }
            x += &(act.dot(&lp.w_ffn2) + &lp.b_ffn2);
            layers.push(LayerCache { ln1, a, q, k, v, probs, attn_drop, context, ln2, c, u, ffn_drop, act });
        }
        let (hidden, final_norm) = layer_norm(&x, &p.final_gamma, &p.final_beta, cfg.layer_norm_eps);
        Ok((hidden, ForwardCache { ids: seq.ids.clone(), key_mask, layers, final_norm }))
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative
    /// with respect to the encoder output is `d_hidden`.
    pub fn backward(&self, cache: &ForwardCache, d_hidden: &Array2<f64>, grads: &mut Params) {
        let cfg = &self.config;
        let p = &self.params;
        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        let dh = cfg.head_dim();

        let mut dx = layer_norm_backward(
            d_hidden,
            &cache.final_norm,
            &p.final_gamma,
            &mut grads.final_gamma,
            &mut grads.final_beta,
        );
        for (l, (lp, lc)) in p.layers.iter().zip(&cache.layers).enumerate().rev() {
            let g = &mut grads.layers[l];

            // feed-forward branch
            g.b_ffn2 += &dx.sum_axis(Axis(0));
            g.w_ffn2 += &lc.act.t().dot(&dx);
            let mut d_act = dx.dot(&lp.w_ffn2.t());
            if let Some(m) = &lc.ffn_drop {
                d_act *= m;
            }
            let du = d_act * &lc.u.mapv(gelu_grad);
            g.b_ffn1 += &du.sum_axis(Axis(0));
            g.w_ffn1 += &lc.c.t().dot(&du);
            let dc = du.dot(&lp.w_ffn1.t());
            dx += &layer_norm_backward(&dc, &lc.ln2, &lp.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);

            // attention branch
            g.b_o += &dx.sum_axis(Axis(0));
            g.w_o += &lc.context.t().dot(&dx);
            let d_context = dx.dot(&lp.w_o.t());
            let n = dx.nrows();
            let mut dq = Array2::<f64>::zeros((n, cfg.d_model));
            let mut dk = Array2::<f64>::zeros((n, cfg.d_model));
            let mut dv = Array2::<f64>::zeros((n, cfg.d_model));
            for h in 0..cfg.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let probs = &lc.probs[h];
                let d_out = d_context.slice(cols);
                let dropped = match &lc.attn_drop[h] {
                    Some(m) => probs * m,
                    None => probs.clone(),
                };
                dv.slice_mut(cols).assign(&dropped.t().dot(&d_out));
                let mut d_probs = d_out.dot(&lc.v.slice(cols).t());
                if let Some(m) = &lc.attn_drop[h] {
                    d_probs *= m;
                }
                let d_logits = softmax_backward(probs, &d_probs) * scale;
                dq.slice_mut(cols).assign(&d_logits.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&d_logits.t().dot(&lc.q.slice(cols)));
            }
            g.b_q += &dq.sum_axis(Axis(0));
            g.b_k += &dk.sum_axis(Axis(0));
            g.b_v += &dv.sum_axis(Axis(0));
            g.w_q += &lc.a.t().dot(&dq);
            g.w_k += &lc.a.t().dot(&dk);
            g.w_v += &lc.a.t().dot(&dv);
            let da = dq.dot(&lp.w_q.t()) + dk.dot(&lp.w_k.t()) + dv.dot(&lp.w_v.t());
            dx += &layer_norm_backward(&da, &lc.ln1, &lp.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut tok = grads.token_embedding.row_mut(id as usize);
            tok += &dx.row(i);
            let mut pos = grads.position_embedding.row_mut(i);
            pos += &dx.row(i);
        }
        debug_assert_eq!(cache.key_mask.len(), cache.ids.len());
    }
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_model)·V`. Keys whose
/// `key_mask` entry is `false` get `-∞` logits. Returns the output and
/// the attention weights.
pub fn attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    key_mask: Option<&[bool]>,
    d_model: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if q.ncols() != k.ncols() {
        return Err(Error::ShapeMismatch(format!("query width {} vs key width {}", q.ncols(), k.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::ShapeMismatch(format!("{} keys vs {} values", k.nrows(), v.nrows())));
    }
    let all = vec![true; k.nrows()];
    let mask = key_mask.unwrap_or(&all);
    if mask.len() != k.nrows() {
        return Err(Error::ShapeMismatch(format!("key mask of {} for {} keys", mask.len(), k.nrows())));
    }
    if d_model == 0 {
        return Err(Error::ShapeMismatch("d_model must be positive".into()));
    }
    let weights = attention_weights(q, k, mask, 1.0 / (d_model as f64).sqrt());
    Ok((weights.dot(&v), weights))
}

fn attention_weights(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, key_mask: &[bool], scale: f64) -> Array2<f64> {
    let mut logits = q.dot(&k.t());
    for mut row in logits.rows_mut() {
        let max =
            row.iter().zip(key_mask).filter(|(_, &m)| m).map(|(&x, _)| x * scale).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (x, &m) in row.iter_mut().zip(key_mask) {
            *x = if m { (*x * scale - max).exp() } else { 0.0 };
            sum += *x;
        }
        if sum > 0.0 {
            row /= sum;
        }
    }
    logits
}

/// Gradient of the logits given softmax output `p` and its upstream `dp`.
fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut out = p * dp;
    for (mut row, prow) in out.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&prow, |o, &pv| *o -= pv * dot);
    }
    out
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>, eps: f64) -> (Array2<f64>, NormCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * r));
    }
    let y = &xhat * gamma + beta;
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gamma: &Array1<f64>,
    d_gamma: &mut Array1<f64>,
    d_beta: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_beta += &dy.sum_axis(Axis(0));
    let mut dx = dy * gamma;
    let d = dx.ncols() as f64;
    for ((mut row, xhat), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
        row.zip_mut_with(&xhat, |g, &xh| *g = r * (*g - m1 - xh * m2));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Inverted dropout: entries are `0` or `1/(1-p)`.
fn dropout_mask(rng: &mut TrainRng, dim: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Reduces hidden states to one vector: row 0 (`cls`) or the average of
/// rows whose mask entry is 1 (`mean`).
pub fn pool(hidden: &Array2<f64>, mask: &[u8], strategy: Pooling) -> Result<Embedding> {
    if hidden.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    match strategy {
        Pooling::Cls => Ok(Embedding(hidden.row(0).to_vec())),
        Pooling::Mean => {
            if mask.len() != hidden.nrows() {
                return Err(Error::ShapeMismatch(format!("mask of {} for {} rows", mask.len(), hidden.nrows())));
            }
            let count = mask.iter().filter(|&&m| m == 1).count();
            if count == 0 {
                return Err(Error::EmptySequence);
            }
            let mut acc = Array1::<f64>::zeros(hidden.ncols());
            for (row, _) in hidden.rows().into_iter().zip(mask).filter(|(_, &m)| m == 1) {
                acc += &row;
            }
            Ok(Embedding((acc / count as f64).to_vec()))
        }
    }
}

/// Gradient of the pooled vector spread back over the hidden rows.
pub fn pool_backward(d_pooled: &[f64], mask: &[u8], strategy: Pooling, rows: usize) -> Array2<f64> {
    let d = d_pooled.len();
    let mut out = Array2::<f64>::zeros((rows, d));
    let grad = ndarray::ArrayView1::from(d_pooled);
    match strategy {
        Pooling::Cls => out.row_mut(0).assign(&grad),
        Pooling::Mean => {
            let count = mask.iter().filter(|&&m| m == 1).count().max(1) as f64;
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == 1) {
                out.row_mut(i).assign(&(&grad / count));
            }
        }
    }
    out
}
