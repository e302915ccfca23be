use std::collections::BTreeSet;

use embedit::bias::{alpha_weight, balanced_loss, BalancerParams};
use embedit::editor::LossPositions;
use embedit::encoder::{self, EncoderWeights};
use embedit::eval::{classify, filter_sequential_dataset, EditEntry};
use embedit::fixtures::{self, FIXTURE_WORDS};
use embedit::probe::split;
use embedit::{EmbeditError, Encoder, Tensor};
use proptest::prelude::*;

fn fixture_prompt() -> impl Strategy<Value = Vec<String>> {
    let words: Vec<String> = FIXTURE_WORDS
        .iter()
        .map(|w| w.to_string())
        .chain(["pineapple".to_string()])
        .collect();
    proptest::collection::vec(proptest::sample::select(words), 1..8)
}

fn encoder() -> Encoder {
    fixtures::tiny_encoder(42)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn token_sequences_are_well_formed(words in fixture_prompt()) {
        let enc = encoder();
        let vocab = &enc.vocab;
        match enc.tokenize(&words.join(" ")) {
            Ok(t) => {
                prop_assert_eq!(t.ids.len(), enc.config.context_length);
                prop_assert_eq!(t.ids[0], vocab.bos());
                prop_assert_eq!(t.ids[t.eos_position], vocab.eos());
                prop_assert!(t.ids[t.eos_position + 1..].iter().all(|&id| id == vocab.pad()));
                prop_assert!(t.ids[1..t.eos_position].iter().all(|&id| !vocab.is_special(id)));
            }
            Err(EmbeditError::Overflow { needed, context_length }) => {
                prop_assert!(needed > context_length);
            }
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }

    #[test]
    fn unused_rows_never_affect_a_prompt(
        words in fixture_prompt(),
        noise in proptest::collection::vec(-1.0f64..1.0, 8),
        seed in 0u64..1000,
    ) {
        let enc = Encoder::random(embedit::EncoderConfig::tiny(0), fixtures::fixture_vocab(), seed).unwrap();
        let Ok(tokens) = enc.tokenize(&words.join(" ")) else { return Ok(()) };
        let used: BTreeSet<u32> = tokens.ids.iter().copied().collect();
        let mut other: EncoderWeights = enc.weights.clone();
        for id in 0..enc.vocab.len() as u32 {
            if !used.contains(&id) {
                other.set_wte_row(id, &noise).unwrap();
            }
        }
        let a = encoder::encode(&tokens, &enc.weights, &enc.config).unwrap();
        let b = encoder::encode(&tokens, &other, &enc.config).unwrap();
        prop_assert!(a.bitwise_eq(&b));
        prop_assert!(a.pooled.bitwise_eq(&Tensor::vector(a.sequence.row(a.eos_position).to_vec()).unwrap()));
    }

    #[test]
    fn archives_round_trip_bitwise(seed in any::<u64>()) {
        let enc = Encoder::random(embedit::EncoderConfig::tiny(0), fixtures::fixture_vocab(), seed).unwrap();
        let bytes = encoder::to_bytes(&enc.config, &enc.weights, &enc.vocab).unwrap();
        let (config, weights, vocab) = encoder::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&config, &enc.config);
        prop_assert!(weights.bitwise_eq(&enc.weights));
        prop_assert_eq!(encoder::to_bytes(&config, &weights, &vocab).unwrap(), bytes);
    }

    #[test]
    fn alpha_is_floored_and_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, floor in 1.0f64..8.0) {
        let params = BalancerParams { alpha_min: floor, ..BalancerParams::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(alpha_weight(lo, &params) >= floor);
        prop_assert!(alpha_weight(lo, &params) <= alpha_weight(hi, &params));
    }

    #[test]
    fn balanced_loss_is_nonnegative_and_zero_only_on_agreement(
        p in proptest::collection::vec(-2.0f64..2.0, 4),
        q in proptest::collection::vec(-2.0f64..2.0, 4),
        alpha in 1.0f64..20.0,
    ) {
        let h = |v: &Vec<f64>| encoder::HiddenStates {
            sequence: Tensor::matrix(1, 4, v.clone()).unwrap(),
            pooled: Tensor::vector(v.clone()).unwrap(),
            eos_position: 0,
        };
        let loss = balanced_loss(&h(&p), &h(&q), &h(&q), alpha, LossPositions::FullSequence).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, p == q);
        prop_assert_eq!(balanced_loss(&h(&p), &h(&p), &h(&p), alpha, LossPositions::FullSequence).unwrap(), 0.0);
    }

    #[test]
    fn classify_ignores_positive_scale(
        v in proptest::collection::vec(-3.0f64..3.0, 5),
        r1 in proptest::collection::vec(-3.0f64..3.0, 5),
        r2 in proptest::collection::vec(-3.0f64..3.0, 5),
        c in 1e-3f64..1e3,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let t = |x: &Vec<f64>| Tensor::vector(x.clone()).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let a = classify(&t(&v), &t(&r1), &t(&r2));
        let b = classify(&t(&scaled), &t(&r1), &t(&r2));
        prop_assert_eq!(a.ok(), b.ok());
    }

    #[test]
    fn split_is_a_partition(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, test) = split(n, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, frac, seed).unwrap(), (train, test));
    }

    #[test]
    fn sequential_filter_is_idempotent(
        links in proptest::collection::vec(proptest::collection::vec(0usize..12, 0..4), 12),
        excluded in proptest::collection::vec(0usize..12, 0..3),
    ) {
        let target = |i: usize| format!("t{i}");
        let entries: Vec<EditEntry> = links
            .iter()
            .enumerate()
            .map(|(i, refs)| EditEntry {
                source: format!("a {}", target(i)),
                destination: format!("the {}", target(i)),
                target_word: target(i),
                positives: vec![],
                negatives: refs
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| (format!("a {} here", target(j)), String::from("a here")))
                    .chain([("nothing here".to_string(), "nothing".to_string())])
                    .collect(),
            })
            .collect();
        let exclusions: Vec<String> = excluded.into_iter().map(target).collect();
        let once = filter_sequential_dataset(&entries, &exclusions);
        prop_assert_eq!(filter_sequential_dataset(&once, &exclusions), once.clone());
        prop_assert!(once.iter().all(|e| e.negatives.iter().any(|(n, _)| n == "nothing here")));
    }
}
