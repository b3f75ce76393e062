mod common;

use std::collections::HashMap;

use common::{check_gradient, micro, padded};
use irmatch_core::bpe::{CLS_ID, EOS_ID, PAD_ID};
use irmatch_core::encoder::EncoderModel;
use irmatch_core::ir::Origin;
use irmatch_core::triplet::{
    sample_triplets, triplet_loss, triplet_loss_and_grad, Pair, PairedCorpus, PairedDoc, Towers, Triplet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 40;

fn corpus(groups: usize, seed: u64) -> PairedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut doc = |origin| {
        let len = rng.random_range(4..10);
        let mut ids = vec![CLS_ID];
        ids.extend((0..len).map(|_| rng.random_range(6..V as u32)));
        ids.push(EOS_ID);
        PairedDoc { origin, input: padded(&ids, 12, PAD_ID) }
    };
    let mut docs = HashMap::new();
    let mut pairs = Vec::new();
    for g in 0..groups {
        let (b, s) = (format!("b{g}"), format!("s{g}"));
        docs.insert(b.clone(), doc(Origin::Binary));
        docs.insert(s.clone(), doc(Origin::Source));
        pairs.push(Pair { binary_id: b, source_id: s, group_id: format!("g{g}") });
    }
    PairedCorpus::new(pairs, docs).unwrap()
}

#[test]
fn negatives_are_uniform_over_foreign_groups() {
    let c = corpus(10, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut kept = 0;
    while kept < 10_000 {
        for t in sample_triplets(&c, 64, &mut rng).unwrap() {
            if t.anchor == "b0" && kept < 10_000 {
                assert_ne!(t.negative, "s0");
                *counts.entry(t.negative).or_default() += 1;
                kept += 1;
            }
        }
    }
    assert_eq!(counts.len(), 9);
    for (id, n) in counts {
        assert!((n as i64 - 1111).abs() <= 150, "{id}: {n}");
    }
}

fn batch(c: &PairedCorpus, seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_triplets(c, 6, &mut rng).unwrap()
}

/// With a wide margin every hinge is active, so the loss is smooth.
const WIDE: f64 = 3.0;

#[test]
fn shared_encoder_gradient() {
    let c = corpus(5, 3);
    let b = batch(&c, 4);
    let towers = Towers::shared(EncoderModel::new(micro(V), 5).unwrap());
    let (stats, grads) = triplet_loss_and_grad(&towers, &c, &b, WIDE, None).unwrap();
    assert_eq!(stats.active, b.len());
    assert!(grads.source.is_none());
    let loss = |m: &EncoderModel| triplet_loss(&Towers::shared(m.clone()), &c, &b, WIDE).unwrap().loss;
    check_gradient(&towers.binary, &grads.binary, loss, 30, 6);
}

#[test]
fn two_tower_gradients() {
    let c = corpus(5, 7);
    let b = batch(&c, 8);
    let towers = Towers {
        binary: EncoderModel::new(micro(V), 9).unwrap(),
        source: Some(EncoderModel::new(micro(V), 10).unwrap()),
    };
    let (_, grads) = triplet_loss_and_grad(&towers, &c, &b, WIDE, None).unwrap();
    let source_grads = grads.source.as_ref().unwrap();

    let with_binary = |m: &EncoderModel| {
        let t = Towers { binary: m.clone(), source: towers.source.clone() };
        triplet_loss(&t, &c, &b, WIDE).unwrap().loss
    };
    check_gradient(&towers.binary, &grads.binary, with_binary, 20, 11);

    let with_source = |m: &EncoderModel| {
        let t = Towers { binary: towers.binary.clone(), source: Some(m.clone()) };
        triplet_loss(&t, &c, &b, WIDE).unwrap().loss
    };
    check_gradient(towers.source.as_ref().unwrap(), source_grads, with_source, 20, 12);
}

#[test]
fn loss_agrees_with_cosine_oracle() {
    let c = corpus(4, 13);
    let b = batch(&c, 14);
    let model = EncoderModel::new(micro(V), 15).unwrap();
    let towers = Towers::shared(model.clone());
    let embed = |id: &str| model.embed(&c.doc(id).unwrap().input).unwrap().0;
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nx * ny)
    };
    for margin in [0.0, 0.06, 0.5, 2.0] {
        let expected: f64 = b
            .iter()
            .map(|t| {
                let a = embed(&t.anchor);
                (margin - cos(&a, &embed(&t.positive)) + cos(&a, &embed(&t.negative))).max(0.0)
            })
            .sum::<f64>()
            / b.len() as f64;
        let got = triplet_loss(&towers, &c, &b, margin).unwrap().loss;
        assert!((got - expected).abs() < 1e-9, "margin {margin}: {got} vs {expected}");
    }
}
