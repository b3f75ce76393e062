//! Precision, recall and F1 over thresholded scores.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::matcher::cosine;
use crate::mlm::training_rng;
use crate::triplet::{PairedCorpus, Towers};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub query_id: String,
    pub candidate_id: String,
    pub score: f64,
    pub is_clone: bool,
}

/// Confusion counts at one threshold. Undefined ratios are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(_), Some(_)) => ratio(2 * tp, 2 * tp + fp + fn_),
            _ => None,
        };
        Self { tp, fp, fn_, tn, precision, recall, f1 }
    }

    pub fn predicted_positive(&self) -> usize {
        self.tp + self.fp
    }
}

/// Decision rule: clone iff `score >= threshold`.
pub fn precision_recall_f1(items: &[LabeledScore], threshold: f64) -> Result<Metrics> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for it in items {
        match (it.score >= threshold, it.is_clone) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
    /// Threshold with the highest defined F1; the lowest such threshold on
    /// ties.
    pub best_threshold: Option<f64>,
}

pub fn threshold_sweep(items: &[LabeledScore], grid: &[f64]) -> Result<Sweep> {
    if items.is_empty() || grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("threshold grid must be ascending".into()));
    }
    let points = grid
        .iter()
        .map(|&t| Ok(SweepPoint { threshold: t, metrics: precision_recall_f1(items, t)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, f64)> = None;
    for p in &points {
        if let Some(f1) = p.metrics.f1 {
            if best.is_none_or(|(b, _)| f1 > b) {
                best = Some((f1, p.threshold));
            }
        }
    }
    Ok(Sweep { points, best_threshold: best.map(|(_, t)| t) })
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding).
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidConfig(format!("grid `{spec}` is not start:stop:step"));
    let parts: Vec<f64> = spec.split(':').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    // round to the step's decimal precision to avoid 0.7000000000000001
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// How candidate pairs were formed; recorded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    pub negatives_per_query: usize,
    pub seed: u64,
}

impl Protocol {
    pub fn one_vs_negatives(negatives_per_query: usize, seed: u64) -> Self {
        Self { name: format!("1-positive-{negatives_per_query}-negatives"), negatives_per_query, seed }
    }
}

pub const DEFAULT_NEGATIVES: usize = 9;

/// Candidate list for each query: its true counterpart plus up to
/// `negatives` distinct candidates from other groups, drawn with a seeded
/// generator. `queries` and `candidates` are `(id, group)`.
pub fn pairing_protocol(
    queries: &[(String, String)],
    candidates: &[(String, String)],
    truth: impl Fn(&str) -> Option<String>,
    protocol: &Protocol,
) -> Result<Vec<(String, String, bool)>> {
    if queries.is_empty() || candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = training_rng(protocol.seed, 3);
    let mut out = Vec::new();
    for (q, group) in queries {
        let positive = truth(q).ok_or_else(|| Error::UnknownDocument(q.clone()))?;
        out.push((q.clone(), positive, true));
        let foreign: Vec<&String> = candidates.iter().filter(|(_, g)| g != group).map(|(id, _)| id).collect();
        for neg in foreign.choose_multiple(&mut rng, protocol.negatives_per_query) {
            out.push((q.clone(), (*neg).clone(), false));
        }
    }
    Ok(out)
}

/// Scores every binary document of `corpus` against its paired source and
/// the protocol's sampled negatives. Binary documents go through the
/// binary tower, sources through the source tower.
pub fn score_protocol(towers: &Towers, corpus: &PairedCorpus, protocol: &Protocol) -> Result<Vec<LabeledScore>> {
    let queries: Vec<(String, String)> =
        corpus.pairs.iter().map(|p| (p.binary_id.clone(), p.group_id.clone())).collect();
    let truth: HashMap<&str, &str> =
        corpus.pairs.iter().map(|p| (p.binary_id.as_str(), p.source_id.as_str())).collect();
    let triples = pairing_protocol(&queries, corpus.sources(), |q| truth.get(q).map(|s| s.to_string()), protocol)?;
    let mut cache: HashMap<String, Embedding> = HashMap::new();
    let mut embed = |id: &str| -> Result<Embedding> {
        if let Some(e) = cache.get(id) {
            return Ok(e.clone());
        }
        let doc = corpus.doc(id)?;
        let e = towers.for_origin(doc.origin).embed(&doc.input)?;
        cache.insert(id.to_string(), e.clone());
        Ok(e)
    };
    triples
        .into_iter()
        .map(|(q, c, is_clone)| {
            let score = cosine(&embed(&q)?.0, &embed(&c)?.0)?;
            Ok(LabeledScore { query_id: q, candidate_id: c, score, is_clone })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub protocol: Option<Protocol>,
    pub threshold: f64,
    #[serde(rename = "P")]
    pub precision: Option<f64>,
    #[serde(rename = "R")]
    pub recall: Option<f64>,
    #[serde(rename = "F1")]
    pub f1: Option<f64>,
    pub counts: Metrics,
    pub best_threshold: Option<f64>,
    pub sweep: Vec<SweepPoint>,
}

pub fn report(items: &[LabeledScore], threshold: f64, grid: &[f64], protocol: Option<Protocol>) -> Result<Report> {
    let at = precision_recall_f1(items, threshold)?;
    let sweep = threshold_sweep(items, grid)?;
    Ok(Report {
        protocol,
        threshold,
        precision: at.precision,
        recall: at.recall,
        f1: at.f1,
        counts: at,
        best_threshold: sweep.best_threshold,
        sweep: sweep.points,
    })
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("threshold,tp,fp,fn,tn,precision,recall,f1\n");
    for p in points {
        let m = &p.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.threshold,
            m.tp,
            m.fp,
            m.fn_,
            m.tn,
            opt(m.precision),
            opt(m.recall),
            opt(m.f1)
        ));
    }
    out
}
