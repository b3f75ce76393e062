use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, TrainRng};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w_ffn1: Array2<f64>,
    pub b_ffn1: Array1<f64>,
    pub w_ffn2: Array2<f64>,
    pub b_ffn2: Array1<f64>,
}

/// Every trainable tensor of the encoder. Gradients and optimizer moments
/// use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Array1<f64>,
    pub final_beta: Array1<f64>,
    /// Output bias of the masked-token head; its projection is tied to
    /// `token_embedding`.
    pub mlm_bias: Array1<f64>,
}

fn gaussian(rng: &mut TrainRng, dist: &Normal<f64>, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl LayerParams {
    fn init(cfg: &ModelConfig, rng: &mut TrainRng, dist: &Normal<f64>) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        Self {
            ln1_gamma: Array1::ones(d),
            ln1_beta: Array1::zeros(d),
            w_q: gaussian(rng, dist, d, d),
            b_q: Array1::zeros(d),
            w_k: gaussian(rng, dist, d, d),
            b_k: Array1::zeros(d),
            w_v: gaussian(rng, dist, d, d),
            b_v: Array1::zeros(d),
            w_o: gaussian(rng, dist, d, d),
            b_o: Array1::zeros(d),
            ln2_gamma: Array1::ones(d),
            ln2_beta: Array1::zeros(d),
            w_ffn1: gaussian(rng, dist, d, f),
            b_ffn1: Array1::zeros(f),
            w_ffn2: gaussian(rng, dist, f, d),
            b_ffn2: Array1::zeros(d),
        }
    }

    fn views(&self) -> [(&'static str, ArrayViewD<'_, f64>); 16] {
        [
            ("ln1_gamma", self.ln1_gamma.view().into_dyn()),
            ("ln1_beta", self.ln1_beta.view().into_dyn()),
            ("w_q", self.w_q.view().into_dyn()),
            ("b_q", self.b_q.view().into_dyn()),
            ("w_k", self.w_k.view().into_dyn()),
            ("b_k", self.b_k.view().into_dyn()),
            ("w_v", self.w_v.view().into_dyn()),
            ("b_v", self.b_v.view().into_dyn()),
            ("w_o", self.w_o.view().into_dyn()),
            ("b_o", self.b_o.view().into_dyn()),
            ("ln2_gamma", self.ln2_gamma.view().into_dyn()),
            ("ln2_beta", self.ln2_beta.view().into_dyn()),
            ("w_ffn1", self.w_ffn1.view().into_dyn()),
            ("b_ffn1", self.b_ffn1.view().into_dyn()),
            ("w_ffn2", self.w_ffn2.view().into_dyn()),
            ("b_ffn2", self.b_ffn2.view().into_dyn()),
        ]
    }

    fn views_mut(&mut self) -> [(&'static str, ArrayViewMutD<'_, f64>); 16] {
        [
            ("ln1_gamma", self.ln1_gamma.view_mut().into_dyn()),
            ("ln1_beta", self.ln1_beta.view_mut().into_dyn()),
            ("w_q", self.w_q.view_mut().into_dyn()),
            ("b_q", self.b_q.view_mut().into_dyn()),
            ("w_k", self.w_k.view_mut().into_dyn()),
            ("b_k", self.b_k.view_mut().into_dyn()),
            ("w_v", self.w_v.view_mut().into_dyn()),
            ("b_v", self.b_v.view_mut().into_dyn()),
            ("w_o", self.w_o.view_mut().into_dyn()),
            ("b_o", self.b_o.view_mut().into_dyn()),
            ("ln2_gamma", self.ln2_gamma.view_mut().into_dyn()),
            ("ln2_beta", self.ln2_beta.view_mut().into_dyn()),
            ("w_ffn1", self.w_ffn1.view_mut().into_dyn()),
            ("b_ffn1", self.b_ffn1.view_mut().into_dyn()),
            ("w_ffn2", self.w_ffn2.view_mut().into_dyn()),
            ("b_ffn2", self.b_ffn2.view_mut().into_dyn()),
        ]
    }
}

impl Params {
    pub(crate) fn init(cfg: &ModelConfig, rng: &mut TrainRng) -> Self {
        let dist = Normal::new(0.0, cfg.init_std).expect("validated std");
        let d = cfg.d_model;
        let token_embedding = gaussian(rng, &dist, cfg.vocab_size, d);
        let position_embedding = gaussian(rng, &dist, cfg.max_len, d);
        let layers = (0..cfg.n_layers).map(|_| LayerParams::init(cfg, rng, &dist)).collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_gamma: Array1::ones(d),
            final_beta: Array1::zeros(d),
            mlm_bias: Array1::zeros(cfg.vocab_size),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    pub fn fill(&mut self, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// Named views in a fixed order: embeddings, layers, final norm, head.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view().into_dyn()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.views().into_iter().map(|(name, v)| (format!("layers.{l}.{name}"), v)));
        }
        out.push(("final_gamma".to_string(), self.final_gamma.view().into_dyn()));
        out.push(("final_beta".to_string(), self.final_beta.view().into_dyn()));
        out.push(("mlm_bias".to_string(), self.mlm_bias.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view_mut().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view_mut().into_dyn()),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.views_mut().into_iter().map(|(name, v)| (format!("layers.{l}.{name}"), v)));
        }
        out.push(("final_gamma".to_string(), self.final_gamma.view_mut().into_dyn()));
        out.push(("final_beta".to_string(), self.final_beta.view_mut().into_dyn()));
        out.push(("mlm_bias".to_string(), self.mlm_bias.view_mut().into_dyn()));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t *= factor;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}
