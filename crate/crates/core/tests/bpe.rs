mod common;

use common::{brute_force_merges, mini_corpus};
use irmatch_core::bpe::{train_bpe, Vocabulary, UNK_ID};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn first_merges_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let corpus = mini_corpus(&mut rng);
        let vocab = train_bpe(&corpus, 10_000, 2).unwrap();
        let expected = brute_force_merges(&corpus, 10, 2);
        let got = &vocab.merges()[..vocab.merges().len().min(10)];
        assert_eq!(got, &expected[..], "case {case}: {corpus:?}");
    }
}

#[test]
fn encoding_round_trips_and_respects_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let corpus = mini_corpus(&mut rng);
        let base = train_bpe(&corpus, 10_000, 100_000).unwrap().len();
        for size in [base, base + 1, base + 4, base + 30] {
            let vocab = train_bpe(&corpus, size, 1).unwrap();
            assert!(vocab.len() <= size);
            for words in &corpus {
                let ids = vocab.encode(words);
                assert!(!ids.contains(&UNK_ID));
                assert!(ids.len() >= words.len());
                assert_eq!(&vocab.decode(&ids).unwrap(), words);
            }
            let reloaded = Vocabulary::from_file_str(&vocab.to_file_string()).unwrap();
            assert_eq!(reloaded, vocab);
        }
        assert!(train_bpe(&corpus, base - 1, 1).is_err());
    }
}
