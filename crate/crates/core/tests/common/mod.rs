#![allow(dead_code)]

use std::collections::HashMap;

use irmatch_core::bpe::TokenSequence;
use irmatch_core::encoder::{Embedding, EncoderModel, ModelConfig, Params, Pooling};
use irmatch_core::eval::LabeledScore;
use irmatch_core::ir::Origin;
use irmatch_core::matcher::{EmbeddingIndex, IndexEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        ffn_dim: 16,
        max_len: 16,
        dropout: 0.4,
        vocab_size,
        pooling: Pooling::Cls,
        init_std: 0.2,
        layer_norm_eps: 1e-5,
    }
}

pub fn padded(ids: &[u32], total: usize, fill: u32) -> TokenSequence {
    let mut seq = TokenSequence::unpadded(ids.to_vec());
    while seq.ids.len() < total {
        seq.ids.push(fill);
        seq.attention_mask.push(0);
    }
    seq
}

/// Central differences on `samples` randomly chosen parameters with a
/// non-negligible analytic gradient. Returns the worst relative error.
pub fn gradient_error(
    model: &EncoderModel,
    analytic: &Params,
    loss: impl Fn(&EncoderModel) -> f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let analytic: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let candidates: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(ti, v)| v.iter().enumerate().filter(|(_, g)| g.abs() > 1e-5).map(move |(vi, _)| (ti, vi)))
        .collect();
    assert!(!candidates.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (ti, vi) = candidates[rng.random_range(0..candidates.len())];
        let mut plus = model.clone();
        let mut minus = model.clone();
        *plus.params.tensors_mut()[ti].1.iter_mut().nth(vi).unwrap() += eps;
        *minus.params.tensors_mut()[ti].1.iter_mut().nth(vi).unwrap() -= eps;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let g = analytic[ti][vi];
        worst = worst.max((numeric - g).abs() / numeric.abs().max(g.abs()));
    }
    worst
}

pub fn check_gradient(
    model: &EncoderModel,
    analytic: &Params,
    loss: impl Fn(&EncoderModel) -> f64,
    samples: usize,
    seed: u64,
) -> usize {
    let worst = gradient_error(model, analytic, loss, samples, seed);
    assert!(worst < 1e-3, "relative error {worst}");
    samples
}

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '-')
}

/// Consistently renames every local, label and non-intrinsic global.
pub fn rename(text: &str) -> String {
    let mut map: HashMap<String, String> = HashMap::new();
    let mut fresh = |sigil: char, name: &str| -> String {
        let key = format!("{sigil}{name}");
        let n = map.len();
        map.entry(key)
            .or_insert_with(|| if sigil == '@' { format!("zz_g{}", 997 - n) } else { format!("q{}_t", 997 - n) })
            .clone()
    };
    let mut out = String::with_capacity(text.len() + 64);
    for line in text.lines() {
        let trimmed = line.trim_end();
        if let Some(label) = trimmed.strip_suffix(':').filter(|l| !l.is_empty() && l.chars().all(is_ident)) {
            out.push_str(&fresh('%', label));
            out.push_str(":\n");
            continue;
        }
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if (c == '%' || c == '@') && i + 1 < chars.len() && is_ident(chars[i + 1]) {
                let start = i + 1;
                let mut end = start;
                while end < chars.len() && is_ident(chars[end]) {
                    end += 1;
                }
                let name: String = chars[start..end].iter().collect();
                out.push(c);
                if c == '@' && name.starts_with("llvm.") {
                    out.push_str(&name);
                } else {
                    out.push_str(&fresh(c, &name));
                }
                i = end;
            } else {
                out.push(c);
                i += 1;
            }
        }
        out.push('\n');
    }
    out
}

/// Only canonical names may survive normalization.
pub fn canonical_token(tok: &str) -> bool {
    let numbered =
        |prefix: &str| tok.strip_prefix(prefix).is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()));
    let named = tok.starts_with('%') || tok.starts_with('@') || tok.starts_with('!');
    numbered("%v") || numbered("%bb") || numbered("@g") || numbered("fn") || tok.starts_with("@llvm.") || !named
}

pub fn mini_corpus(rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let alphabet: Vec<char> = "abcde%_0".chars().collect();
    let lexicon: Vec<String> = (0..rng.random_range(3..9))
        .map(|_| (0..rng.random_range(1..7)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect())
        .collect();
    (0..rng.random_range(2..6))
        .map(|_| (0..rng.random_range(1..12)).map(|_| lexicon[rng.random_range(0..lexicon.len())].clone()).collect())
        .collect()
}

/// Recounts every adjacent pair over the whole corpus at each round.
pub fn brute_force_merges(corpus: &[Vec<String>], rounds: usize, min_freq: usize) -> Vec<(String, String)> {
    let mut words: Vec<Vec<String>> = corpus.iter().flatten().map(|w| w.chars().map(String::from).collect()).collect();
    let mut merges = Vec::new();
    for _ in 0..rounds {
        let mut candidates: Vec<((String, String), usize)> = Vec::new();
        for w in &words {
            for i in 0..w.len().saturating_sub(1) {
                let pair = (w[i].clone(), w[i + 1].clone());
                match candidates.iter_mut().find(|(p, _)| *p == pair) {
                    Some((_, n)) => *n += 1,
                    None => candidates.push((pair, 1)),
                }
            }
        }
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let Some(((l, r), n)) = candidates.into_iter().next() else { break };
        if n < min_freq {
            break;
        }
        for w in &mut words {
            let mut merged = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    merged.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    merged.push(w[i].clone());
                    i += 1;
                }
            }
            *w = merged;
        }
        merges.push((l, r));
    }
    merges
}

pub fn random_items(rng: &mut ChaCha8Rng) -> Vec<LabeledScore> {
    let n = rng.random_range(1..60);
    (0..n)
        .map(|i| LabeledScore {
            query_id: format!("q{}", i % 7),
            candidate_id: format!("c{i}"),
            // coarse grid so that scores often equal the threshold exactly
            score: (rng.random_range(-20..=20) as f64) / 20.0,
            is_clone: rng.random_bool(0.3),
        })
        .collect()
}

/// Confusion counts and ratios computed from scratch.
pub struct Reference {
    pub counts: (usize, usize, usize, usize),
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn reference_metrics(items: &[LabeledScore], t: f64) -> Reference {
    let predicted: Vec<&LabeledScore> = items.iter().filter(|x| x.score >= t).collect();
    let tp = predicted.iter().filter(|x| x.is_clone).count();
    let fp = predicted.len() - tp;
    let fn_ = items.iter().filter(|x| x.is_clone && x.score < t).count();
    let tn = items.len() - tp - fp - fn_;
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Reference { counts: (tp, fp, fn_, tn), precision, recall, f1 }
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() < 1e-12,
        (None, None) => true,
        _ => false,
    }
}

pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Random index (with occasional duplicate vectors), a query, `k`, and the
/// expected hits from sorting every cosine.
pub fn random_search_case(rng: &mut ChaCha8Rng) -> (EmbeddingIndex, Embedding, usize, Vec<(String, f64)>) {
    let dim = rng.random_range(2..9);
    let n = rng.random_range(1..40);
    let vector = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if v.iter().any(|x| x.abs() > 1e-3) {
                return v;
            }
        }
    };
    let mut index = EmbeddingIndex::new("fp", dim);
    let mut vectors: Vec<(String, Vec<f64>)> = Vec::new();
    for i in 0..n {
        let v = if i > 0 && rng.random_bool(0.1) {
            vectors[rng.random_range(0..vectors.len())].1.clone()
        } else {
            vector(rng)
        };
        let id = format!("d{:03}", rng.random_range(0..1000) * 100 + i);
        vectors.push((id.clone(), v.clone()));
        index
            .push(IndexEntry { doc_id: id, embedding: Embedding(v), origin: Origin::Source, language_tag: None })
            .unwrap();
    }
    let q = vector(rng);
    let k = rng.random_range(1..=n + 2);
    let mut expected: Vec<(String, f64)> = vectors.iter().map(|(id, v)| (id.clone(), naive_cosine(&q, v))).collect();
    expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    expected.truncate(k);
    (index, Embedding(q), k, expected)
}
