mod common;

use std::collections::HashSet;

use pairdebias::corpus::{counterfactual_swap, ingest_str, keep_count, toxicity_filter, Corpus, PronounMap};
use pairdebias::text;
use proptest::prelude::*;

use common::{gender_lists, offline_corpus};

fn with_scores(corpus: &Corpus, scores: &[(f64, f64)]) -> Corpus {
    let mut c = corpus.clone();
    for (g, (a, b)) in c.groups.iter_mut().zip(scores) {
        g.toxicity = Some(vec![*a, *b]);
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ingest_round_trips(n in 1usize..8, per in 1usize..6, seed in 0u64..1000) {
        let lists = gender_lists(n);
        let corpus = offline_corpus(&lists, per, seed);
        let back = ingest_str(&corpus.to_jsonl(), &lists);
        prop_assert!(back.rejected.is_empty());
        prop_assert_eq!(back.corpus.groups, corpus.groups);
    }

    #[test]
    fn swap_is_an_involution(
        words in proptest::collection::vec(
            prop::sample::select(vec!["the", "Man", "man", "he", "She", "his", "her", "boss", "went", ",", "."]),
            0..12,
        ),
        at in 0usize..12,
    ) {
        let mut words: Vec<&str> = words;
        words.insert(at.min(words.len()), "man");
        let t = words.join(" ");
        let map = PronounMap::from_pairs(&[("he", "she"), ("his", "her")]).symmetric();
        let there = counterfactual_swap(&t, "man", "woman", &map).unwrap();
        let back = counterfactual_swap(&there, "woman", "man", &map).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn toxicity_filter_keeps_the_least_toxic(
        scores in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 20),
        fraction in 0.01f64..=1.0,
    ) {
        let corpus = with_scores(&offline_corpus(&gender_lists(4), 5, 0), &scores);
        let kept = toxicity_filter(&corpus, fraction).unwrap();
        prop_assert_eq!(kept.len(), keep_count(fraction, corpus.len()).unwrap());
        prop_assert_eq!(kept.len(), ((fraction * 20.0) - 1e-9).ceil() as usize);
        let ids: HashSet<&str> = kept.groups.iter().map(|g| g.group_id.as_str()).collect();
        let tox = |g: &pairdebias::corpus::PairwiseGroup| g.group_toxicity().unwrap();
        let max_kept = kept.groups.iter().map(tox).fold(f64::NEG_INFINITY, f64::max);
        let min_dropped = corpus
            .groups
            .iter()
            .filter(|g| !ids.contains(g.group_id.as_str()))
            .map(tox)
            .fold(f64::INFINITY, f64::min);
        prop_assert!(max_kept <= min_dropped);
        prop_assert!(kept.groups.windows(2).all(|w| tox(&w[0]) <= tox(&w[1])));
    }

    #[test]
    fn offline_variants_differ_only_at_attribute_and_pronouns(n in 1usize..6, seed in 0u64..500) {
        let corpus = offline_corpus(&gender_lists(n), 10, seed);
        let allowed = [("he", "she"), ("his", "her"), ("him", "her"), ("himself", "herself")];
        for g in &corpus.groups {
            let a = text::tokenize(&g.variant(0).text);
            let b = text::tokenize(&g.variant(1).text);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(x == y || allowed.contains(&(x.as_str(), y.as_str())), "{} vs {}", x, y);
            }
        }
    }
}

#[test]
fn generated_groups_have_one_variant_per_index() {
    let lists = pairdebias::corpus::WordLists::new(
        vec![vec!["he".into(), "she".into()], vec!["man".into(), "woman".into()]],
        vec!["pilot".into(), "nurse".into()],
    )
    .unwrap();
    let corpus = offline_corpus(&lists, 10, 3);
    assert_eq!(corpus.len(), 2 * 2 * 10);
    for g in &corpus.groups {
        let idx: Vec<usize> = g.variants.iter().map(|v| v.attribute_index).collect();
        assert_eq!(idx, vec![0, 1]);
    }
}

#[test]
fn offline_generation_is_seeded() {
    let lists = gender_lists(5);
    assert_eq!(offline_corpus(&lists, 7, 11).to_jsonl(), offline_corpus(&lists, 7, 11).to_jsonl());
    assert_ne!(offline_corpus(&lists, 7, 11).to_jsonl(), offline_corpus(&lists, 7, 12).to_jsonl());
}
