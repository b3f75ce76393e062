//! Margin ranking fine-tuning on paired binary/source documents.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::TokenSequence;
use crate::encoder::{pool, pool_backward, EncoderModel, ForwardCache, Mode, Params, TrainRng};
use crate::error::{Error, Result};
use crate::ir::Origin;
use crate::matcher::{cosine, cosine_with_grad};
use crate::mlm::training_rng;
use crate::optim::{Adam, AdamConfig};

pub const DEFAULT_MARGIN: f64 = 0.06;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub binary_id: String,
    pub source_id: String,
    pub group_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDoc {
    pub origin: Origin,
    pub input: TokenSequence,
}

/// Pairs plus the model inputs of every referenced document.
#[derive(Debug, Clone)]
pub struct PairedCorpus {
    pub pairs: Vec<Pair>,
    docs: HashMap<String, PairedDoc>,
    /// Distinct source documents with their group, in first-seen order.
    sources: Vec<(String, String)>,
}

impl PairedCorpus {
    pub fn new(pairs: Vec<Pair>, docs: HashMap<String, PairedDoc>) -> Result<Self> {
        let mut sources = Vec::new();
        let mut seen = HashMap::new();
        for p in &pairs {
            let check = |id: &str, side: Origin| -> Result<()> {
                let doc = docs.get(id).ok_or_else(|| Error::UnknownDocument(id.to_string()))?;
                if doc.origin != side && doc.origin != Origin::Synthetic {
                    return Err(Error::InvalidConfig(format!(
                        "document {id} has origin {} but is paired as {side}",
                        doc.origin
                    )));
                }
                Ok(())
            };
            check(&p.binary_id, Origin::Binary)?;
            check(&p.source_id, Origin::Source)?;
            match seen.get(&p.source_id) {
                None => {
                    seen.insert(p.source_id.clone(), p.group_id.clone());
                    sources.push((p.source_id.clone(), p.group_id.clone()));
                }
                Some(g) if g != &p.group_id => {
                    return Err(Error::InvalidConfig(format!(
                        "source {} appears in groups {g} and {}",
                        p.source_id, p.group_id
                    )));
                }
                Some(_) => {}
            }
        }
        Ok(Self { pairs, docs, sources })
    }

    pub fn doc(&self, id: &str) -> Result<&PairedDoc> {
        self.docs.get(id).ok_or_else(|| Error::UnknownDocument(id.to_string()))
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.group_id.as_str()).collect()
    }

    /// Distinct source documents and their groups.
    pub fn sources(&self) -> &[(String, String)] {
        &self.sources
    }

    /// Keeps only pairs whose group satisfies `keep`.
    pub fn filter_groups(&self, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let pairs = self.pairs.iter().filter(|p| keep(&p.group_id)).cloned().collect();
        Self::new(pairs, self.docs.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// Strategy for drawing training triplets.
pub trait TripletSampler {
    fn sample(&mut self, corpus: &PairedCorpus, batch_size: usize, rng: &mut TrainRng) -> Result<Vec<Triplet>>;
}

/// Anchor pairs uniformly; negative uniformly among source documents of
/// other groups.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformNegatives;

impl TripletSampler for UniformNegatives {
    fn sample(&mut self, corpus: &PairedCorpus, batch_size: usize, rng: &mut TrainRng) -> Result<Vec<Triplet>> {
        sample_triplets(corpus, batch_size, rng)
    }
}

pub fn sample_triplets(corpus: &PairedCorpus, batch_size: usize, rng: &mut TrainRng) -> Result<Vec<Triplet>> {
    let groups = corpus.groups().len();
    if groups < 2 {
        return Err(Error::InsufficientGroups(groups));
    }
    let sources = corpus.sources();
    (0..batch_size)
        .map(|_| {
            let pair = &corpus.pairs[rng.random_range(0..corpus.pairs.len())];
            let negative = loop {
                let (id, group) = &sources[rng.random_range(0..sources.len())];
                if group != &pair.group_id {
                    break id.clone();
                }
            };
            Ok(Triplet { anchor: pair.binary_id.clone(), positive: pair.source_id.clone(), negative })
        })
        .collect()
}

/// `max(0, α − sim(b, s⁺) + sim(b, s⁻))` on pooled embeddings.
pub fn triplet_loss_from_embeddings(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    let pos = cosine(anchor, positive)?;
    let neg = cosine(anchor, negative)?;
    Ok((margin - pos + neg).max(0.0))
}

/// A shared encoder, or separate binary and source towers.
#[derive(Debug, Clone, PartialEq)]
pub struct Towers {
    pub binary: EncoderModel,
    pub source: Option<EncoderModel>,
}

impl Towers {
    pub fn shared(model: EncoderModel) -> Self {
        Self { binary: model, source: None }
    }

    pub fn source_tower(&self) -> &EncoderModel {
        self.source.as_ref().unwrap_or(&self.binary)
    }

    /// Tower that embeds documents of this origin. Synthetic documents go
    /// through the source tower.
    pub fn for_origin(&self, origin: Origin) -> &EncoderModel {
        match origin {
            Origin::Binary => &self.binary,
            Origin::Source | Origin::Synthetic => self.source_tower(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BatchStats {
    pub loss: f64,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
    /// Triplets with a positive hinge.
    pub active: usize,
}

pub struct TripletGrads {
    pub binary: Params,
    pub source: Option<Params>,
}

struct Encoded {
    pooled: Vec<f64>,
    cache: ForwardCache,
    rows: usize,
}

fn encode_pooled(model: &EncoderModel, seq: &TokenSequence, rng: &mut Option<&mut TrainRng>) -> Result<Encoded> {
    let mode = match rng.as_deref_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let (hidden, cache) = model.forward(seq, mode)?;
    Ok(Encoded { pooled: pool(&hidden, &seq.attention_mask, model.config.pooling)?.0, rows: hidden.nrows(), cache })
}

/// Mean triplet loss over `batch` in eval mode.
pub fn triplet_loss(towers: &Towers, corpus: &PairedCorpus, batch: &[Triplet], margin: f64) -> Result<BatchStats> {
    Ok(triplet_forward(towers, corpus, batch, margin, None, false)?.0)
}

/// Mean triplet loss and its gradients. Dropout is active when `rng` is
/// given. A triplet whose positive and negative are the same document
/// encodes it once, so its loss is exactly `α`.
pub fn triplet_loss_and_grad(
    towers: &Towers,
    corpus: &PairedCorpus,
    batch: &[Triplet],
    margin: f64,
    rng: Option<&mut TrainRng>,
) -> Result<(BatchStats, TripletGrads)> {
    let (stats, grads) = triplet_forward(towers, corpus, batch, margin, rng, true)?;
    Ok((stats, grads.expect("gradients requested")))
}

fn triplet_forward(
    towers: &Towers,
    corpus: &PairedCorpus,
    batch: &[Triplet],
    margin: f64,
    mut rng: Option<&mut TrainRng>,
    want_grads: bool,
) -> Result<(BatchStats, Option<TripletGrads>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidConfig(format!("margin {margin} must be non-negative")));
    }
    let b_model = &towers.binary;
    let s_model = towers.source_tower();
    let mut grads = want_grads.then(|| TripletGrads {
        binary: b_model.params.zeros_like(),
        source: towers.source.as_ref().map(|m| m.params.zeros_like()),
    });
    let scale = 1.0 / batch.len() as f64;
    let mut stats = BatchStats::default();
    for t in batch {
        let a = encode_pooled(b_model, &corpus.doc(&t.anchor)?.input, &mut rng)?;
        let p = encode_pooled(s_model, &corpus.doc(&t.positive)?.input, &mut rng)?;
        let n = if t.negative == t.positive {
            None
        } else {
            Some(encode_pooled(s_model, &corpus.doc(&t.negative)?.input, &mut rng)?)
        };
        let n_ref = n.as_ref().unwrap_or(&p);
        let (pos, da_p, dp) = cosine_with_grad(&a.pooled, &p.pooled)?;
        let (neg, da_n, dn) = cosine_with_grad(&a.pooled, &n_ref.pooled)?;
        let hinge = margin - pos + neg;
        stats.mean_pos_sim += pos * scale;
        stats.mean_neg_sim += neg * scale;
        if hinge <= 0.0 {
            continue;
        }
        stats.loss += hinge * scale;
        stats.active += 1;
        let Some(g) = grads.as_mut() else { continue };
        let d_anchor: Vec<f64> = da_n.iter().zip(&da_p).map(|(n, p)| (n - p) * scale).collect();
        let (d_pos, d_neg): (Vec<f64>, Vec<f64>) = if n.is_some() {
            (dp.iter().map(|x| -x * scale).collect(), dn.iter().map(|x| x * scale).collect())
        } else {
            // same document on both sides: contributions cancel
            let d: Vec<f64> = dp.iter().zip(&dn).map(|(p, n)| (n - p) * scale).collect();
            (d, Vec::new())
        };
        backprop(b_model, &a, &d_anchor, &t.anchor, corpus, &mut g.binary)?;
        let s_grads = g.source.as_mut().unwrap_or(&mut g.binary);
        backprop(s_model, &p, &d_pos, &t.positive, corpus, s_grads)?;
        if let Some(n) = &n {
            backprop(s_model, n, &d_neg, &t.negative, corpus, s_grads)?;
        }
    }
    if !stats.loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    if let Some(g) = &grads {
        if !g.binary.all_finite() || g.source.as_ref().is_some_and(|s| !s.all_finite()) {
            return Err(Error::NonFiniteLoss);
        }
    }
    Ok((stats, grads))
}

fn backprop(
    model: &EncoderModel,
    enc: &Encoded,
    d_pooled: &[f64],
    doc: &str,
    corpus: &PairedCorpus,
    grads: &mut Params,
) -> Result<()> {
    let mask = &corpus.doc(doc)?.input.attention_mask;
    let d_hidden = pool_backward(d_pooled, mask, model.config.pooling, enc.rows);
    model.backward(&enc.cache, &d_hidden, grads);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub adam: AdamConfig,
    /// Train separate binary and source encoders.
    pub two_tower: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 32, margin: DEFAULT_MARGIN, adam: AdamConfig::default(), two_tower: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
}

/// Averages over one pass worth of steps (`ceil(pairs / batch_size)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
}

pub fn epoch_summaries(steps: &[StepLog], steps_per_epoch: usize) -> Vec<EpochLog> {
    steps
        .chunks(steps_per_epoch.max(1))
        .enumerate()
        .map(|(i, chunk)| {
            let n = chunk.len() as f64;
            EpochLog {
                epoch: i + 1,
                steps: chunk.len(),
                mean_loss: chunk.iter().map(|s| s.loss).sum::<f64>() / n,
                mean_pos_sim: chunk.iter().map(|s| s.mean_pos_sim).sum::<f64>() / n,
                mean_neg_sim: chunk.iter().map(|s| s.mean_neg_sim).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Adam fine-tuning of every parameter with the margin ranking loss.
/// With `two_tower` and a shared `init`, the source tower starts as a copy
/// of the binary one.
pub fn finetune(
    init: Towers,
    corpus: &PairedCorpus,
    config: &FinetuneConfig,
    seed: u64,
    sampler: &mut dyn TripletSampler,
) -> Result<(Towers, Vec<StepLog>)> {
    let groups = corpus.groups().len();
    if groups < 2 {
        return Err(Error::InsufficientGroups(groups));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut towers = init;
    if config.two_tower && towers.source.is_none() {
        towers.source = Some(towers.binary.clone());
    }
    let mut rng = training_rng(seed, 2);
    let mut adam_b = Adam::new(config.adam.clone(), &towers.binary.params);
    let mut adam_s = towers.source.as_ref().map(|m| Adam::new(config.adam.clone(), &m.params));
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch = sampler.sample(corpus, config.batch_size, &mut rng)?;
        let (stats, grads) = triplet_loss_and_grad(&towers, corpus, &batch, config.margin, Some(&mut rng))?;
        adam_b.step(&mut towers.binary.params, &grads.binary);
        if let (Some(adam), Some(model), Some(g)) = (adam_s.as_mut(), towers.source.as_mut(), grads.source.as_ref()) {
            adam.step(&mut model.params, g);
        }
        log.push(StepLog {
            step,
            loss: stats.loss,
            mean_pos_sim: stats.mean_pos_sim,
            mean_neg_sim: stats.mean_neg_sim,
        });
    }
    Ok((towers, log))
}
