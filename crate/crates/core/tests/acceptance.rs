//! Acceptance gate: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use irmatch_core::bpe::{build_model_input, train_bpe, TokenSequence, CLS_ID, EOS_ID, PAD_ID, UNK_ID};
use irmatch_core::corpus::{paired_corpus, CorpusRecord};
use irmatch_core::encoder::Embedding;
use irmatch_core::encoder::{attention, Checkpoint, EncoderModel, ModelConfig, Pooling};
use irmatch_core::eval::{parse_grid, precision_recall_f1, score_protocol, threshold_sweep, LabeledScore, Protocol};
use irmatch_core::ir::Origin;
use irmatch_core::ir::{normalize, parse_ir_text, to_token_stream, NormalizePolicy};
use irmatch_core::matcher::{match_pair, search};
use irmatch_core::mlm::{
    mlm_loss, mlm_loss_and_grad, pretrain, selection_count, MaskUnit, Masker, PretrainConfig, Replacement,
};
use irmatch_core::synth::{generate, SynthSpec};
use irmatch_core::triplet::{
    finetune, sample_triplets, triplet_loss, triplet_loss_and_grad, triplet_loss_from_embeddings, FinetuneConfig, Pair,
    PairedCorpus, PairedDoc, Towers, UniformNegatives,
};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- 1

fn normalization_suite() -> Check {
    let started = Instant::now();
    let policy = NormalizePolicy::default();
    let mut fixtures = Vec::new();
    for (seed, strength) in [(101, 0.0), (102, 0.5), (103, 1.0), (104, 0.3)] {
        let spec = SynthSpec { n_groups: 125, variants_per_group: 2, seed, transform_strength: strength };
        fixtures.extend(generate(&spec).map_err(|e| e.to_string())?.docs);
    }
    ensure!(fixtures.len() == 1000, "{} fixtures", fixtures.len());
    for doc in &fixtures {
        let parsed = parse_ir_text(&doc.text).map_err(|e| format!("{}: {e}", doc.doc_id))?;
        let once = normalize(&parsed, &policy);
        ensure!(normalize(&parsed, &policy) == once, "{}: not deterministic", doc.doc_id);
        ensure!(normalize(&once, &policy) == once, "{}: not idempotent", doc.doc_id);
        let stream = to_token_stream(&once);
        let renamed = normalize(&parse_ir_text(&rename(&doc.text)).map_err(|e| e.to_string())?, &policy);
        ensure!(to_token_stream(&renamed) == stream, "{}: stream depends on names", doc.doc_id);
        ensure!(stream.iter().all(|t| canonical_token(t)), "{}: raw name in stream", doc.doc_id);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("1000 fixtures, {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

fn bpe_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let corpus = mini_corpus(&mut rng);
        let vocab = train_bpe(&corpus, 10_000, 2).map_err(|e| e.to_string())?;
        let again = train_bpe(&corpus, 10_000, 2).map_err(|e| e.to_string())?;
        ensure!(vocab.to_file_string() == again.to_file_string(), "case {case}: retraining differs");
        let expected = brute_force_merges(&corpus, 10, 2);
        let got = &vocab.merges()[..vocab.merges().len().min(10)];
        ensure!(got == &expected[..], "case {case}: merges {got:?} vs {expected:?}");
        for words in &corpus {
            let ids = vocab.encode(words);
            ensure!(!ids.contains(&UNK_ID), "case {case}: in-vocab stream hit [UNK]");
            ensure!(&vocab.decode(&ids).map_err(|e| e.to_string())? == words, "case {case}: round trip");
        }
        let oov = vocab.encode(&["a\u{3bb}b"]);
        ensure!(oov.contains(&UNK_ID), "case {case}: unseen symbol not [UNK]");
    }
    Ok("20 mini-corpora, first 10 merges agree".into())
}

// ---------------------------------------------------------------- 3

fn encoder_numeric_suite() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_row = 0.0f64;
    for _ in 0..100 {
        let (n, m, d) = (rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..9));
        let mut rand_mat = |r, c| Array2::from_shape_simple_fn((r, c), || rng.random_range(-5.0..5.0));
        let (q, k, v) = (rand_mat(n, d), rand_mat(m, d), rand_mat(m, d));
        let (_, w) = attention(q.view(), k.view(), v.view(), None, d).map_err(|e| e.to_string())?;
        for row in w.rows() {
            worst_row = worst_row.max((row.sum() - 1.0).abs());
        }
    }
    ensure!(worst_row < 1e-6, "softmax row sum off by {worst_row}");

    let q = array![[0.3, -1.2], [4.0, 0.5]];
    let k = array![[0.7, 0.1]];
    let v = array![[2.5, -3.0]];
    let (out, _) = attention(q.view(), k.view(), v.view(), None, 2).map_err(|e| e.to_string())?;
    ensure!(out.rows().into_iter().all(|r| r == v.row(0)), "single key output {out:?}");

    let q = array![[1.0, 2.0], [-3.0, 0.5]];
    let k = array![[0.4, 0.4], [0.4, 0.4], [0.4, 0.4], [0.4, 0.4]];
    let v = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
    let (out, w) = attention(q.view(), k.view(), v.view(), None, 2).map_err(|e| e.to_string())?;
    ensure!(w.iter().all(|&x| x == 0.25), "identical keys gave weights {w:?}");
    ensure!(out.iter().all(|&x| x == 0.0), "symmetric values gave {out:?}");

    let v_size = 30;
    let seqs = [
        padded(&[CLS_ID, 6, 7, 8, 9, 10, 11, EOS_ID], 12, PAD_ID),
        padded(&[CLS_ID, 12, 13, 14, 15, 16, 17, 18, EOS_ID], 12, PAD_ID),
    ];
    let model = EncoderModel::new(micro(v_size), 4).map_err(|e| e.to_string())?;
    let masker = Masker::with_boundaries(MaskUnit::Token, v_size, vec![]);
    let mut mrng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<_> = seqs.iter().map(|s| masker.mask(s, &mut mrng).unwrap()).collect();
    let (_, grads) = mlm_loss_and_grad(&model, &batch, None).map_err(|e| e.to_string())?;
    let mlm_err = gradient_error(&model, &grads, |m| mlm_loss(m, &batch).unwrap(), 25, 9);
    ensure!(mlm_err < 1e-3, "MLM head relative error {mlm_err}");

    let mut docs = HashMap::new();
    let mut pairs = Vec::new();
    for g in 0..4u32 {
        let ids: Vec<u32> = (0..6).map(|i| 6 + (g * 5 + i * 3) % 24).collect();
        let mut bin = vec![CLS_ID];
        bin.extend(&ids);
        bin.push(EOS_ID);
        let mut src = vec![CLS_ID];
        src.extend(ids.iter().rev());
        src.push(EOS_ID);
        docs.insert(format!("b{g}"), PairedDoc { origin: Origin::Binary, input: padded(&bin, 10, PAD_ID) });
        docs.insert(format!("s{g}"), PairedDoc { origin: Origin::Source, input: padded(&src, 10, PAD_ID) });
        pairs.push(Pair { binary_id: format!("b{g}"), source_id: format!("s{g}"), group_id: format!("g{g}") });
    }
    let corpus = PairedCorpus::new(pairs, docs).map_err(|e| e.to_string())?;
    let triplets = sample_triplets(&corpus, 5, &mut ChaCha8Rng::seed_from_u64(6)).map_err(|e| e.to_string())?;
    let towers = Towers::shared(model.clone());
    let (_, tgrads) = triplet_loss_and_grad(&towers, &corpus, &triplets, 3.0, None).map_err(|e| e.to_string())?;
    let loss = |m: &EncoderModel| triplet_loss(&Towers::shared(m.clone()), &corpus, &triplets, 3.0).unwrap().loss;
    let trip_err = gradient_error(&model, &tgrads.binary, loss, 25, 10);
    ensure!(trip_err < 1e-3, "triplet head relative error {trip_err}");

    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "row sums within {worst_row:.1e}; grad rel err mlm {mlm_err:.1e}, triplet {trip_err:.1e} (25 params each); {secs:.2}s"
    ))
}

// ---------------------------------------------------------------- 4

fn masking_suite() -> Check {
    ensure!(selection_count(100) == 15, "selection_count(100) = {}", selection_count(100));
    let mut ids = vec![CLS_ID];
    ids.extend((0..100).map(|i| 6 + (i % 40) as u32));
    ids.push(EOS_ID);
    let seq = padded(&ids, 110, PAD_ID);
    let masker = Masker::with_boundaries(MaskUnit::Token, 50, vec![]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut counts, mut total) = ([0usize; 3], 0usize);
    while total < 10_000 {
        let m = masker.mask(&seq, &mut rng).map_err(|e| e.to_string())?;
        ensure!(m.positions.len() == 15, "selected {}", m.positions.len());
        for (&p, r) in m.positions.iter().zip(&m.replacements) {
            ensure!(p != 0 && p <= 100, "special position {p} selected");
            counts[match r {
                Replacement::Mask => 0,
                Replacement::Unchanged => 1,
                Replacement::Random => 2,
            }] += 1;
            total += 1;
        }
    }
    let frac = counts.map(|c| c as f64 / total as f64);
    for (f, want) in frac.iter().zip([0.8, 0.1, 0.1]) {
        ensure!((f - want).abs() <= 0.02, "ratios {frac:?}");
    }
    Ok(format!("15 of 100 selected; mask/keep/random {:.3}/{:.3}/{:.3} over {total}", frac[0], frac[1], frac[2]))
}

// ---------------------------------------------------------------- 5

fn loss_oracles() -> Check {
    let a = [1.0, 0.0];
    let pos = [0.5, 0.75f64.sqrt()];
    let neg = [0.3, 0.91f64.sqrt()];
    let l = triplet_loss_from_embeddings(&a, &pos, &neg, 0.06).map_err(|e| e.to_string())?;
    ensure!(l == 0.0, "cosines 0.5/0.3: loss {l}");
    let l = triplet_loss_from_embeddings(&a, &neg, &pos, 0.06).map_err(|e| e.to_string())?;
    ensure!((l - 0.26).abs() < 1e-12, "cosines 0.3/0.5: loss {l}");
    let l = triplet_loss_from_embeddings(&a, &pos, &pos, 0.06).map_err(|e| e.to_string())?;
    ensure!(l == 0.06, "equal sims: loss {l}");
    let l = triplet_loss_from_embeddings(&a, &[2.0, 0.0], &[-1.0, 0.0], 0.06).map_err(|e| e.to_string())?;
    ensure!(l == 0.0, "satisfied margin: loss {l}");

    let v = 30;
    let mut model = EncoderModel::new(micro(v), 1).map_err(|e| e.to_string())?;
    model.params.token_embedding.fill(0.0);
    model.params.mlm_bias.fill(0.0);
    let masker = Masker::with_boundaries(MaskUnit::Token, v, vec![]);
    let seq = padded(&[CLS_ID, 6, 7, 8, 9, 10, 11, 12, EOS_ID], 12, PAD_ID);
    let m = masker.mask(&seq, &mut ChaCha8Rng::seed_from_u64(2)).map_err(|e| e.to_string())?;
    let loss = mlm_loss(&model, &[m]).map_err(|e| e.to_string())?;
    let gap = (loss - (v as f64).ln()).abs();
    ensure!(gap < 1e-6, "uniform MLM loss {loss}");
    Ok(format!("triplet fixtures exact; uniform MLM loss within {gap:.1e} of ln|V|"))
}

// ---------------------------------------------------------------- 6

fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let items = random_items(&mut rng);
        let t = (rng.random_range(-20..=20) as f64) / 20.0;
        let m = precision_recall_f1(&items, t).map_err(|e| e.to_string())?;
        let r = reference_metrics(&items, t);
        ensure!((m.tp, m.fp, m.fn_, m.tn) == r.counts, "instance {i}: counts");
        ensure!(
            close(m.precision, r.precision) && close(m.recall, r.recall) && close(m.f1, r.f1),
            "instance {i}: ratios"
        );
    }
    let none_predicted = [LabeledScore { query_id: "q".into(), candidate_id: "c".into(), score: 0.1, is_clone: true }];
    let m = precision_recall_f1(&none_predicted, 0.8).map_err(|e| e.to_string())?;
    ensure!(m.precision.is_none() && m.f1.is_none() && m.recall == Some(0.0), "degenerate precision {m:?}");
    let no_clones = [LabeledScore { query_id: "q".into(), candidate_id: "c".into(), score: 0.9, is_clone: false }];
    let m = precision_recall_f1(&no_clones, 0.8).map_err(|e| e.to_string())?;
    ensure!(m.recall.is_none() && m.f1.is_none(), "degenerate recall {m:?}");
    let json = serde_json::to_value(m).map_err(|e| e.to_string())?;
    ensure!(json["recall"].is_null() && json["f1"].is_null(), "serialized {json}");
    Ok("1000 random instances agree; undefined ratios are null".into())
}

// ---------------------------------------------------------------- 7, 8

/// Settings of the desk-scale end-to-end run.
mod desk {
    pub const GROUPS: usize = 50;
    pub const VARIANTS: usize = 2;
    pub const STRENGTH: f64 = 0.5;
    pub const CORPUS_SEED: u64 = 7;
    pub const HELD_OUT_FROM: &str = "g040";
    pub const PRETRAIN_GROUPS: usize = 500;
    pub const PRETRAIN_CORPUS_SEED: u64 = 1001;
    pub const VOCAB_SIZE: usize = 400;
    pub const PRETRAIN_STEPS: usize = 500;
    pub const PRETRAIN_BATCH: usize = 16;
    pub const FINETUNE_STEPS: usize = 300;
    pub const FINETUNE_BATCH: usize = 32;
    pub const MARGIN: f64 = 0.06;
    pub const PRETRAIN_SEED: u64 = 1;
    pub const FINETUNE_SEED: u64 = 2;
    pub const PROTOCOL_SEED: u64 = 3;
    pub const NEGATIVES: usize = 9;
    pub const THRESHOLD: f64 = 0.8;
    pub const MIN_SEPARATION: f64 = 0.3;
    pub const MIN_F1: f64 = 0.7;
    pub const MAX_SECONDS: f64 = 900.0;
}

fn desk_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        ffn_dim: 256,
        max_len: 128,
        dropout: 0.4,
        vocab_size,
        pooling: Pooling::Cls,
        init_std: 0.02,
        layer_norm_eps: 1e-5,
    }
}

fn records(groups: usize, seed: u64) -> Result<(Vec<CorpusRecord>, Vec<Pair>), String> {
    let spec =
        SynthSpec { n_groups: groups, variants_per_group: desk::VARIANTS, seed, transform_strength: desk::STRENGTH };
    let corpus = generate(&spec).map_err(|e| e.to_string())?;
    Ok((corpus.records(&NormalizePolicy::default()).map_err(|e| e.to_string())?, corpus.pairs))
}

struct DeskRun {
    scores: Vec<LabeledScore>,
    checkpoint: Vec<u8>,
    seconds: f64,
}

fn desk_run(pretrain_steps: usize, finetune_steps: usize) -> Result<DeskRun, String> {
    let started = Instant::now();
    let (pre_records, _) = records(desk::PRETRAIN_GROUPS, desk::PRETRAIN_CORPUS_SEED)?;
    let vocab = train_bpe(pre_records.iter().map(|r| &r.tokens), desk::VOCAB_SIZE, 2).map_err(|e| e.to_string())?;
    let config = desk_config(vocab.len());
    let inputs: Vec<TokenSequence> =
        pre_records.iter().map(|r| build_model_input(&vocab.encode(&r.tokens), None, config.max_len)).collect();
    let train = PretrainConfig { steps: pretrain_steps, batch_size: desk::PRETRAIN_BATCH, ..PretrainConfig::default() };
    let masker = Masker::new(&vocab, MaskUnit::Token);
    let (model, _) = pretrain(&inputs, config.clone(), &train, &masker, desk::PRETRAIN_SEED, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;

    let (recs, pairs) = records(desk::GROUPS, desk::CORPUS_SEED)?;
    let all = paired_corpus(&recs, pairs, &vocab, config.max_len).map_err(|e| e.to_string())?;
    let train_set = all.filter_groups(|g| g < desk::HELD_OUT_FROM).map_err(|e| e.to_string())?;
    let held_out = all.filter_groups(|g| g >= desk::HELD_OUT_FROM).map_err(|e| e.to_string())?;
    let ft = FinetuneConfig {
        steps: finetune_steps,
        batch_size: desk::FINETUNE_BATCH,
        margin: desk::MARGIN,
        ..FinetuneConfig::default()
    };
    let (towers, _) = finetune(Towers::shared(model), &train_set, &ft, desk::FINETUNE_SEED, &mut UniformNegatives)
        .map_err(|e| e.to_string())?;
    let protocol = Protocol::one_vs_negatives(desk::NEGATIVES, desk::PROTOCOL_SEED);
    let scores = score_protocol(&towers, &held_out, &protocol).map_err(|e| e.to_string())?;
    let mut ckpt = Checkpoint::new(towers.binary);
    ckpt.vocab = Some(vocab);
    Ok(DeskRun { scores, checkpoint: ckpt.to_bytes(), seconds: started.elapsed().as_secs_f64() })
}

fn end_to_end(run: &Result<DeskRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let mean = |clone: bool| {
        let v: Vec<f64> = run.scores.iter().filter(|s| s.is_clone == clone).map(|s| s.score).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let queries = run.scores.iter().filter(|s| s.is_clone).count();
    ensure!(
        queries == 10 && run.scores.len() == 10 * (1 + desk::NEGATIVES),
        "protocol produced {} scores",
        run.scores.len()
    );
    let separation = mean(true) - mean(false);
    let m = precision_recall_f1(&run.scores, desk::THRESHOLD).map_err(|e| e.to_string())?;
    let f1 = m.f1.unwrap_or(0.0);

    let short_a = desk_run(20, 10)?;
    let short_b = desk_run(20, 10)?;
    let reproducible = short_a.checkpoint == short_b.checkpoint;

    let detail = format!(
        "sep {separation:.3} (pair {:.3}, non-pair {:.3}); F1@{} {f1:.3} (tp {} fp {} fn {}); {:.0}s; reproducible {reproducible}",
        mean(true),
        mean(false),
        desk::THRESHOLD,
        m.tp,
        m.fp,
        m.fn_,
        run.seconds
    );
    ensure!(separation > desk::MIN_SEPARATION, "{detail}");
    ensure!(f1 >= desk::MIN_F1, "{detail}");
    ensure!(run.seconds < desk::MAX_SECONDS, "{detail}");
    ensure!(reproducible, "{detail}");
    Ok(detail)
}

fn sweep_property(run: &Result<DeskRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let grid = parse_grid("0.5:0.98:0.02").map_err(|e| e.to_string())?;
    let sweep = threshold_sweep(&run.scores, &grid).map_err(|e| e.to_string())?;
    let first = &sweep.points[0];
    let last = sweep.points.last().unwrap();
    ensure!((last.threshold - 0.98).abs() < 1e-9, "grid ends at {}", last.threshold);
    let (r_lo, r_hi) = (first.metrics.recall.unwrap_or(0.0), last.metrics.recall.unwrap_or(0.0));
    ensure!(r_hi < r_lo, "recall@0.98 {r_hi} vs recall@0.5 {r_lo}");
    let counts: Vec<usize> = sweep.points.iter().map(|p| p.metrics.predicted_positive()).collect();
    ensure!(counts.windows(2).all(|w| w[1] <= w[0]), "predicted positives {counts:?}");
    Ok(format!("recall {r_lo:.2} -> {r_hi:.2}; predicted positives {} -> {}", counts[0], counts[counts.len() - 1]))
}

// ---------------------------------------------------------------- 9

fn matching_boundary() -> Check {
    let a = Embedding(vec![3.0, 4.0]);
    let b = Embedding(vec![4.0, 3.0]);
    let (score, matched) = match_pair(&a, &b, 0.96).map_err(|e| e.to_string())?;
    ensure!(score == 0.96 && matched, "score {score} matched {matched}");
    let (score, matched) = match_pair(&a, &b, score).map_err(|e| e.to_string())?;
    ensure!(matched, "score {score} equal to threshold not matched");
    let (_, matched) = match_pair(&a, &b, 0.9600000000000001).map_err(|e| e.to_string())?;
    ensure!(!matched, "above-score threshold matched");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let (index, q, k, expected) = random_search_case(&mut rng);
        let hits = search(&q, &index, k, "fp").map_err(|e| e.to_string())?;
        ensure!(hits.len() == expected.len(), "case {case}: {} hits", hits.len());
        for (h, (id, s)) in hits.iter().zip(&expected) {
            ensure!(&h.doc_id == id && (h.score - s).abs() < 1e-12, "case {case}: {} vs {id}", h.doc_id);
        }
    }
    Ok("inclusive threshold; 200 random indices match brute-force order".into())
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Check) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("PASS [{id}] {name}: {detail} ({secs:.1}s)"),
        Err(detail) => println!("FAIL [{id}] {name}: {detail} ({secs:.1}s)"),
    }
    outcome.is_ok()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= run(1, "normalization suite", normalization_suite);
    ok &= run(2, "BPE suite", bpe_suite);
    ok &= run(3, "encoder numeric suite", encoder_numeric_suite);
    ok &= run(4, "masking suite", masking_suite);
    ok &= run(5, "loss oracles", loss_oracles);
    ok &= run(6, "metrics oracle", metrics_oracle);
    let desk = catch_unwind(|| desk_run(desk::PRETRAIN_STEPS, desk::FINETUNE_STEPS))
        .unwrap_or_else(|_| Err("desk run panicked".into()));
    ok &= run(7, "end-to-end desk run", || end_to_end(&desk));
    ok &= run(8, "threshold sweep property", || sweep_property(&desk));
    ok &= run(9, "matching boundary and search oracle", matching_boundary);
    if !ok {
        std::process::exit(1);
    }
}
