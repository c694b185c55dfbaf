mod common;

use codesum::codec::{decode_prediction, encode_target, greedy_split_word, tokenize_comment, TokenSequence};
use codesum::corpus::{deduplicate, split_dataset, DatasetRecord, SplitScheme};
use codesum::metrics::{bleu4, comment_entropy, modified_precision};
use codesum::numerics::{ParamSet, Tape, Tensor};
use codesum::vocab::{propagate_counts, EnglishDictionary, WordCounts};
use common::{bleu_oracle, random_comment, random_vocabulary, rng, spans_balanced};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn tokens() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn counts() -> impl Strategy<Value = WordCounts> {
    prop::collection::btree_map("[a-f]{1,8}", 1u64..50, 1..30)
        .prop_map(|m| m.into_iter().collect())
}

fn dictionary() -> impl Strategy<Value = EnglishDictionary> {
    prop::collection::vec("[a-f]{1,5}", 1..15).prop_map(|w| EnglishDictionary::from_words(w).unwrap())
}

fn records() -> impl Strategy<Value = Vec<DatasetRecord>> {
    prop::collection::vec(("[ab]{1,3}", "[xy]{1,2}"), 0..40).prop_map(|pairs| {
        pairs
            .into_iter()
            .map(|(code, comment)| DatasetRecord::new(code, comment))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn propagation_is_idempotent(c in counts(), d in dictionary()) {
        let once = propagate_counts(&c, &d);
        prop_assert_eq!(propagate_counts(&once, &d), once);
    }

    #[test]
    fn propagation_conserves_character_mass(c in counts(), d in dictionary()) {
        prop_assert_eq!(propagate_counts(&c, &d).character_mass(), c.character_mass());
    }

    #[test]
    fn vocabulary_build_is_deterministic(seed in any::<u64>()) {
        let a = random_vocabulary(&mut rng(seed));
        let b = random_vocabulary(&mut rng(seed));
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        prop_assert_eq!(a.elements(), b.elements());
    }

    #[test]
    fn codec_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let vocab = random_vocabulary(&mut r);
        let tokens = tokenize_comment(&random_comment(&mut r));
        let encoded = encode_target(&tokens, &vocab).unwrap();
        prop_assert!(spans_balanced(encoded.ids()));
        prop_assert_eq!(decode_prediction(encoded.ids(), &vocab), tokens.joined());
    }

    #[test]
    fn tokens_hold_no_whitespace(raw in ".{0,60}") {
        for t in tokenize_comment(&raw).tokens() {
            prop_assert!(!t.is_empty() && !t.chars().any(char::is_whitespace));
        }
    }

    #[test]
    fn greedy_split_concatenates_to_word(seed in any::<u64>(), word in "[a-z0-9]{1,20}") {
        let vocab = random_vocabulary(&mut rng(seed));
        let parts = greedy_split_word(&word, &vocab).unwrap();
        prop_assert_eq!(parts.concat(), word);
        for p in &parts {
            prop_assert!(vocab.element_id(p).is_some());
        }
    }

    #[test]
    fn precision_matches_scanning_oracle(pred in tokens(), reference in tokens()) {
        let (p, r): (TokenSequence, TokenSequence) = (pred.iter().collect(), reference.iter().collect());
        for n in 1..=4 {
            let got = modified_precision(&p, &r, n).unwrap();
            prop_assert_eq!((got.matched, got.total), bleu_oracle::precision(&pred, &reference, n));
        }
    }

    #[test]
    fn bleu_is_bounded_and_one_on_identity(pred in tokens(), reference in tokens()) {
        let (p, r): (TokenSequence, TokenSequence) = (pred.iter().collect(), reference.iter().collect());
        let score = bleu4(&p, &r).score;
        prop_assert!((0.0..=1.0).contains(&score));
        if reference.len() >= 4 {
            prop_assert!((bleu4(&r, &r).score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_ignores_comment_order(comments in prop::collection::vec(tokens(), 1..10), seed in any::<u64>()) {
        prop_assume!(comments.iter().any(|c| !c.is_empty()));
        let seqs: Vec<TokenSequence> = comments.iter().map(|c| c.iter().collect()).collect();
        let mut shuffled = seqs.clone();
        shuffled.shuffle(&mut rng(seed));
        let a = comment_entropy(&seqs).unwrap().entropy_bits;
        let b = comment_entropy(&shuffled).unwrap().entropy_bits;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dedup_is_idempotent(rs in records()) {
        let (once, _) = deduplicate(rs);
        let (twice, removed) = deduplicate(once.clone());
        prop_assert_eq!(removed, 0);
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn split_is_a_partition(n in 10usize..200, seed in any::<u64>()) {
        let rs: Vec<DatasetRecord> = (0..n)
            .map(|i| DatasetRecord::new(format!("code {i}"), format!("c {i}")))
            .collect();
        let s = split_dataset(rs.clone(), SplitScheme::Ratio, seed).unwrap();
        let mut all: Vec<DatasetRecord> = s.train.records().iter()
            .chain(s.validation.records())
            .chain(s.test.records())
            .cloned()
            .collect();
        all.sort_by(|a, b| a.code.cmp(&b.code));
        let mut expected = rs;
        expected.sort_by(|a, b| a.code.cmp(&b.code));
        prop_assert_eq!(all, expected);
        prop_assert_eq!(s.test.len(), n / 10);
        prop_assert_eq!(s.validation.len(), n / 10);
    }

    #[test]
    fn sum_pool_ignores_row_order(rows in prop::collection::vec(prop::collection::vec(-4i32..4, 3), 1..8), seed in any::<u64>()) {
        let pool = |rows: &[Vec<i32>]| {
            let data = rows.iter().flatten().map(|&v| v as f32 * 0.5).collect();
            let params = ParamSet::new();
            let mut tape = Tape::new(&params);
            let x = tape.input(Tensor::new(vec![rows.len(), 3], data).unwrap());
            let y = tape.sum_pool(x).unwrap();
            tape.value(y).data().to_vec()
        };
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng(seed));
        prop_assert_eq!(pool(&rows), pool(&shuffled));
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(logits in prop::collection::vec(-5.0f32..5.0, 2..8), shift in -20.0f32..20.0, pick in any::<prop::sample::Index>()) {
        let target = pick.index(logits.len());
        let ce = |l: Vec<f32>| {
            let params = ParamSet::new();
            let mut tape = Tape::new(&params);
            let x = tape.input(Tensor::vector(l).unwrap());
            let loss = tape.softmax_cross_entropy(x, target).unwrap();
            tape.scalar(loss)
        };
        let shifted = logits.iter().map(|v| v + shift).collect();
        prop_assert!((ce(logits) - ce(shifted)).abs() < 1e-5);
    }
}
