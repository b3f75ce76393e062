//! Masked-language-model pre-training.

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::bpe::{is_special, TokenSequence, Vocabulary, MASK_ID, NUM_SPECIALS};
use crate::encoder::{EncoderModel, ForwardCache, Mode, ModelConfig, Params, TrainRng};
use crate::error::{Error, Result};
use crate::ir::{FUNCTION_SENTINEL, INSTRUCTION_SENTINEL};
use crate::optim::{Adam, AdamConfig};

pub const MASK_RATE: f64 = 0.15;
pub const REPLACE_WITH_MASK: f64 = 0.8;
pub const KEEP_UNCHANGED: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskUnit {
    #[default]
    Token,
    /// Whole instructions, delimited by `<i>`/`<f>` sentinels.
    Instruction,
}

impl std::str::FromStr for MaskUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token" => Ok(MaskUnit::Token),
            "instruction" => Ok(MaskUnit::Instruction),
            other => Err(format!("unknown mask unit `{other}`")),
        }
    }
}

/// What happened to a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Unchanged,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: TokenSequence,
    /// Original id at selected positions, `None` (ignored) elsewhere.
    pub labels: Vec<Option<u32>>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    pub replacements: Vec<Replacement>,
}

#[derive(Debug, Clone)]
pub struct Masker {
    pub unit: MaskUnit,
    pub vocab_size: usize,
    boundary_ids: Vec<u32>,
}

/// `max(1, round(0.15 * n))`
pub fn selection_count(maskable: usize) -> usize {
    ((MASK_RATE * maskable as f64).round() as usize).max(1)
}

impl Masker {
    pub fn new(vocab: &Vocabulary, unit: MaskUnit) -> Self {
        let boundary_ids = [INSTRUCTION_SENTINEL, FUNCTION_SENTINEL].iter().filter_map(|s| vocab.id(s)).collect();
        Self { unit, vocab_size: vocab.len(), boundary_ids }
    }

    pub fn with_boundaries(unit: MaskUnit, vocab_size: usize, boundary_ids: Vec<u32>) -> Self {
        Self { unit, vocab_size, boundary_ids }
    }

    /// Groups of positions that are selected together: single tokens, or
    /// the tokens of one instruction.
    fn units(&self, seq: &TokenSequence) -> Vec<Vec<usize>> {
        let maskable = |i: usize| seq.attention_mask[i] == 1 && !is_special(seq.ids[i]);
        match self.unit {
            MaskUnit::Token => (0..seq.len()).filter(|&i| maskable(i)).map(|i| vec![i]).collect(),
            MaskUnit::Instruction => {
                let mut spans = Vec::new();
                let mut current = Vec::new();
                for i in 0..seq.len() {
                    if self.boundary_ids.contains(&seq.ids[i]) || !maskable(i) {
                        if !current.is_empty() {
                            spans.push(std::mem::take(&mut current));
                        }
                    } else {
                        current.push(i);
                    }
                }
                if !current.is_empty() {
                    spans.push(current);
                }
                spans
            }
        }
    }

    /// Selects `max(1, round(0.15 * units))` units uniformly without
    /// replacement; each selected position becomes `[MASK]` (80%), stays
    /// (10%) or becomes a random non-special id (10%).
    pub fn mask(&self, seq: &TokenSequence, rng: &mut TrainRng) -> Result<MaskedSequence> {
        let units = self.units(seq);
        if units.is_empty() {
            return Err(Error::NothingToMask);
        }
        let k = selection_count(units.len()).min(units.len());
        let mut chosen = sample(rng, units.len(), k).into_vec();
        chosen.sort_unstable();
        let mut positions: Vec<usize> = chosen.iter().flat_map(|&u| units[u].iter().copied()).collect();
        positions.sort_unstable();

        let mut input = seq.clone();
        let mut labels = vec![None; seq.len()];
        let mut replacements = Vec::with_capacity(positions.len());
        for &p in &positions {
            labels[p] = Some(seq.ids[p]);
            let u: f64 = rng.random();
            let r = if u < REPLACE_WITH_MASK {
                input.ids[p] = MASK_ID;
                Replacement::Mask
            } else if u < REPLACE_WITH_MASK + KEEP_UNCHANGED {
                Replacement::Unchanged
            } else {
                input.ids[p] = rng.random_range(NUM_SPECIALS as u32..self.vocab_size as u32);
                Replacement::Random
            };
            replacements.push(r);
        }
        Ok(MaskedSequence { input, labels, positions, replacements })
    }
}

/// Cross-entropy of the tied output head over one sequence's labeled
/// positions. Returns the summed loss, the count, and (when `grad_scale`
/// is given) accumulates gradients scaled by it.
fn head_loss(
    model: &EncoderModel,
    hidden: &Array2<f64>,
    example: &MaskedSequence,
    grad: Option<(f64, &mut Params)>,
) -> (f64, usize, Option<Array2<f64>>) {
    let picked: Vec<(usize, u32)> = example.labels.iter().enumerate().filter_map(|(i, l)| l.map(|y| (i, y))).collect();
    if picked.is_empty() {
        return (0.0, 0, None);
    }
    let emb = &model.params.token_embedding;
    let rows: Vec<usize> = picked.iter().map(|&(i, _)| i).collect();
    let h = hidden.select(Axis(0), &rows);
    let logits = h.dot(&emb.t()) + &model.params.mlm_bias;
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (mut row, &(_, y)) in probs.rows_mut().into_iter().zip(&picked) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y as usize];
        row.mapv_inplace(|v| (v - lse).exp());
    }
    let d_hidden = grad.map(|(scale, grads)| {
        let mut d_logits = probs;
        for (mut row, &(_, y)) in d_logits.rows_mut().into_iter().zip(&picked) {
            row[y as usize] -= 1.0;
            row *= scale;
        }
        grads.mlm_bias += &d_logits.sum_axis(Axis(0));
        grads.token_embedding += &d_logits.t().dot(&h);
        let dh = d_logits.dot(emb);
        let mut full = Array2::<f64>::zeros(hidden.dim());
        for (k, &(i, _)) in picked.iter().enumerate() {
            full.row_mut(i).assign(&dh.row(k));
        }
        full
    });
    (total, picked.len(), d_hidden)
}

/// Mean cross-entropy over all labeled positions of the batch, eval mode.
pub fn mlm_loss(model: &EncoderModel, batch: &[MaskedSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in batch {
        let hidden = model.encode(&ex.input, Mode::Eval)?;
        let (sum, n, _) = head_loss(model, &hidden, ex, None);
        total += sum;
        count += n;
    }
    if count == 0 {
        return Err(Error::NoMaskedPositions);
    }
    Ok(total / count as f64)
}

/// Loss and gradient of [`mlm_loss`]; dropout is active when an RNG is
/// supplied.
pub fn mlm_loss_and_grad(
    model: &EncoderModel,
    batch: &[MaskedSequence],
    mut rng: Option<&mut TrainRng>,
) -> Result<(f64, Params)> {
    let count: usize = batch.iter().map(|ex| ex.labels.iter().flatten().count()).sum();
    if count == 0 {
        return Err(Error::NoMaskedPositions);
    }
    let scale = 1.0 / count as f64;
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        let mode = match rng.as_deref_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let (hidden, cache): (Array2<f64>, ForwardCache) = model.forward(&ex.input, mode)?;
        let (sum, n, d_hidden) = head_loss(model, &hidden, ex, Some((scale, &mut grads)));
        total += sum;
        if n > 0 {
            model.backward(&cache, &d_hidden.expect("gradient requested"), &mut grads);
        }
    }
    let loss = total * scale;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub unit: MaskUnit,
    pub adam: AdamConfig,
    /// Invoke the checkpoint callback every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 16, unit: MaskUnit::Token, adam: AdamConfig::default(), checkpoint_every: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Stream for everything after initialization, so that init depends on
/// the seed alone.
pub(crate) fn training_rng(seed: u64, stream: u64) -> TrainRng {
    let mut rng = TrainRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initializes an encoder from `config` and `seed`, then runs
/// `train.steps` Adam steps of masked-token prediction over batches drawn
/// uniformly (with replacement) from `corpus`.
pub fn pretrain(
    corpus: &[TokenSequence],
    config: ModelConfig,
    train: &PretrainConfig,
    masker: &Masker,
    seed: u64,
    on_checkpoint: impl FnMut(usize, &EncoderModel) -> Result<()>,
) -> Result<(EncoderModel, Vec<LogRow>)> {
    let model = EncoderModel::new(config, seed)?;
    continue_pretraining(model, corpus, train, masker, seed, on_checkpoint)
}

pub fn continue_pretraining(
    mut model: EncoderModel,
    corpus: &[TokenSequence],
    train: &PretrainConfig,
    masker: &Masker,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &EncoderModel) -> Result<()>,
) -> Result<(EncoderModel, Vec<LogRow>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if train.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut rng = training_rng(seed, 1);
    let mut adam = Adam::new(train.adam.clone(), &model.params);
    let mut log = Vec::with_capacity(train.steps);
    for step in 1..=train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        let mut attempts = 0;
        while batch.len() < train.batch_size {
            attempts += 1;
            if attempts > 100 * train.batch_size {
                return Err(Error::NothingToMask);
            }
            let seq = &corpus[rng.random_range(0..corpus.len())];
            match masker.mask(seq, &mut rng) {
                Ok(m) => batch.push(m),
                Err(Error::NothingToMask) => continue,
                Err(e) => return Err(e),
            }
        }
        let (loss, grads) = mlm_loss_and_grad(&model, &batch, Some(&mut rng))?;
        adam.step(&mut model.params, &grads);
        log.push(LogRow { step, loss, lr: train.adam.learning_rate });
        if train.checkpoint_every.is_some_and(|n| n > 0 && step % n == 0) {
            on_checkpoint(step, &model)?;
        }
    }
    Ok((model, log))
}

/// Uniform logits give exactly `ln |V|`; used as a reference point.
pub fn uniform_loss(vocab_size: usize) -> f64 {
    (vocab_size as f64).ln()
}
