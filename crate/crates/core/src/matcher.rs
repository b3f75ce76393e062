//! Cosine scoring, threshold decisions and exact top-k search.

use std::cmp::Ordering;
use std::path::Path;

use serde::Serialize;

use crate::bpe::{build_model_input, Vocabulary};
use crate::encoder::{Embedding, EncoderModel};
use crate::error::{Error, Result};
use crate::ir::Origin;

pub const DEFAULT_THRESHOLD: f64 = 0.8;

fn check_pair(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((na, nb))
}

/// `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_pair(a, b)?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine with its gradients with respect to both arguments.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = check_pair(a, b)?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let da = a.iter().zip(b).map(|(x, y)| y / (na * nb) - cos * x / (na * na)).collect();
    let db = a.iter().zip(b).map(|(x, y)| x / (na * nb) - cos * y / (nb * nb)).collect();
    Ok((cos, da, db))
}

/// Score and inclusive threshold decision.
pub fn match_pair(a: &Embedding, b: &Embedding, threshold: f64) -> Result<(f64, bool)> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside [-1, 1]")));
    }
    let score = cosine(&a.0, &b.0)?;
    Ok((score, score >= threshold))
}

/// Eval-mode embedding of a normalized token stream: BPE-encode, wrap as a
/// single segment truncated to the model's `max_len`, encode and pool.
pub fn embed_document<S: AsRef<str>>(model: &EncoderModel, tokens: &[S], vocab: &Vocabulary) -> Result<Embedding> {
    let ids = vocab.encode(tokens);
    let input = build_model_input(&ids, None, model.config.max_len);
    model.embed(&input)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub doc_id: String,
    pub embedding: Embedding,
    pub origin: Origin,
    pub language_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub model_fingerprint: String,
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

const INDEX_MAGIC: &[u8] = b"irmatch-idx v1\n";

impl EmbeddingIndex {
    pub fn new(model_fingerprint: impl Into<String>, dim: usize) -> Self {
        Self { model_fingerprint: model_fingerprint.into(), dim, entries: Vec::new() }
    }

    pub fn push(&mut self, entry: IndexEntry) -> Result<()> {
        if entry.embedding.dim() != self.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: entry.embedding.dim() });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// ```text
    /// "irmatch-idx v1\n"
    /// u32 len, fingerprint; u32 dim; u32 count
    /// per entry: u32 len, doc_id; u32 len, origin; u32 len, language tag
    ///            (empty: none); dim x f32
    /// ```
    /// Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        fn blob(out: &mut Vec<u8>, b: &[u8]) {
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            out.extend_from_slice(b);
        }
        let mut out = INDEX_MAGIC.to_vec();
        blob(&mut out, self.model_fingerprint.as_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            blob(&mut out, e.doc_id.as_bytes());
            blob(&mut out, e.origin.to_string().as_bytes());
            blob(&mut out, e.language_tag.as_deref().unwrap_or("").as_bytes());
            for &v in &e.embedding.0 {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("index", m);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(INDEX_MAGIC.len())? != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let model_fingerprint = cur.string()?;
        let dim = cur.u32()?;
        let count = cur.u32()?;
        let mut index = Self::new(model_fingerprint, dim);
        for _ in 0..count {
            let doc_id = cur.string()?;
            let origin = cur.string()?.parse().map_err(|e: String| bad(&e))?;
            let lang = cur.string()?;
            let raw = cur.take(dim * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            index.entries.push(IndexEntry {
                doc_id,
                embedding: Embedding(values),
                origin,
                language_tag: (!lang.is_empty()).then_some(lang),
            });
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("index", "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("index", "invalid UTF-8"))
    }
}

/// Descending score, then ascending doc id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Exact top-`k` by cosine. `fingerprint` must match the index's.
pub fn search(query: &Embedding, index: &EmbeddingIndex, k: usize, fingerprint: &str) -> Result<Vec<Hit>> {
    if index.model_fingerprint != fingerprint {
        return Err(Error::FingerprintMismatch {
            index: index.model_fingerprint.clone(),
            model: fingerprint.to_string(),
        });
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut hits = index
        .entries
        .iter()
        .map(|e| Ok(Hit { doc_id: e.doc_id.clone(), score: cosine(&query.0, &e.embedding.0)? }))
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(rank_order);
    hits.truncate(k);
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding(v.to_vec())
    }

    #[test]
    fn cosine_fixtures() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[3.0, -4.0], &[3.0, -4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch { left: 1, right: 2 })));
    }

    #[test]
    fn threshold_is_inclusive() {
        // cos = 0.8 exactly: [0.8, 0.6] vs [1, 0]
        let (score, matched) = match_pair(&e(&[0.8, 0.6]), &e(&[1.0, 0.0]), 0.8).unwrap();
        assert_eq!(score, 0.8);
        assert!(matched);
        let (_, matched) = match_pair(&e(&[0.79, (1.0f64 - 0.79 * 0.79).sqrt()]), &e(&[1.0, 0.0]), 0.8).unwrap();
        assert!(!matched);
        let x = e(&[0.3, -0.2, 5.0]);
        assert!(match_pair(&x, &x, 1.0).unwrap().1);
        assert!(match_pair(&x, &x, 1.5).is_err());
    }

    #[test]
    fn cosine_gradient_by_finite_difference() {
        let a = [0.3, -1.1, 0.7];
        let b = [1.2, 0.4, -0.5];
        let (_, da, db) = cosine_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let num = (cosine(&ap, &b).unwrap() - cosine(&am, &b).unwrap()) / (2.0 * h);
            assert!((num - da[i]).abs() < 1e-8);
            let mut bp = b;
            let mut bm = b;
            bp[i] += h;
            bm[i] -= h;
            let num = (cosine(&a, &bp).unwrap() - cosine(&a, &bm).unwrap()) / (2.0 * h);
            assert!((num - db[i]).abs() < 1e-8);
        }
    }

    fn index_of(vectors: &[(&str, &[f64])]) -> EmbeddingIndex {
        let mut idx = EmbeddingIndex::new("fp", vectors[0].1.len());
        for (id, v) in vectors {
            idx.push(IndexEntry {
                doc_id: id.to_string(),
                embedding: e(v),
                origin: Origin::Source,
                language_tag: Some("c".into()),
            })
            .unwrap();
        }
        idx
    }

    #[test]
    fn search_fixture_order() {
        // cosines with [1, 0]: a=1, b=e=1/√2 (exact tie), c=0, d=-1/√2
        let idx = index_of(&[
            ("c", &[0.0, 2.0]),
            ("e", &[1.0, 1.0]),
            ("a", &[5.0, 0.0]),
            ("d", &[-1.0, 1.0]),
            ("b", &[1.0, 1.0]),
        ]);
        let hits = search(&e(&[1.0, 0.0]), &idx, 5, "fp").unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "e", "c", "d"]);
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(search(&e(&[1.0, 0.0]), &idx, 50, "fp").unwrap().len(), 5);
        assert_eq!(search(&e(&[1.0, 0.0]), &idx, 2, "fp").unwrap().len(), 2);
    }

    #[test]
    fn search_errors() {
        let idx = index_of(&[("a", &[1.0])]);
        assert!(matches!(search(&e(&[1.0]), &idx, 1, "other"), Err(Error::FingerprintMismatch { .. })));
        let empty = EmbeddingIndex::new("fp", 1);
        assert!(matches!(search(&e(&[1.0]), &empty, 1, "fp"), Err(Error::EmptyIndex)));
    }

    #[test]
    fn index_round_trip() {
        let mut idx = index_of(&[("a", &[0.5, -0.25]), ("b", &[1.0, 2.0])]);
        idx.entries[1].language_tag = None;
        idx.entries[1].origin = Origin::Binary;
        let bytes = idx.to_bytes();
        assert!(bytes.starts_with(b"irmatch-idx v1\n"));
        assert_eq!(EmbeddingIndex::from_bytes(&bytes).unwrap(), idx);
        assert!(EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetry_and_scale(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            lambda in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|&x| x.abs() > 1e-3) && b.iter().any(|&x| x.abs() > 1e-3));
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((ab - cosine(&b, &a).unwrap()).abs() < 1e-9);
            let scaled: Vec<f64> = a.iter().map(|x| x * lambda).collect();
            prop_assert!((ab - cosine(&scaled, &b).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
