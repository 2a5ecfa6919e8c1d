#![allow(dead_code)]

pub mod oracle;

use pairdebias::corpus::{Corpus, WordLists};
use pairdebias::encoder::{EncoderConfig, EncoderModel};
use pairdebias::llm_gen::{generate_groups, GenerationConfig};
use pairdebias::pipeline::corpus_tokenizer;
use pairdebias::synthetic::OCCUPATIONS;

pub fn gender_lists(n_targets: usize) -> WordLists {
    WordLists::new(
        vec![vec!["he".into(), "she".into()]],
        OCCUPATIONS[..n_targets].iter().map(|s| s.to_string()).collect(),
    )
    .unwrap()
}

pub fn offline_corpus(lists: &WordLists, per_prompt: usize, seed: u64) -> Corpus {
    let cfg = GenerationConfig {
        sentences_per_prompt: per_prompt,
        seed,
        ..GenerationConfig::default()
    };
    generate_groups(lists, &cfg).unwrap()
}

pub fn model_for(corpus: &Corpus, d_model: usize, layers: usize, seed: u64) -> EncoderModel {
    EncoderModel::new(
        EncoderConfig {
            d_model,
            layers,
            heads: 2,
            seed,
            ..EncoderConfig::default()
        },
        corpus_tokenizer(corpus, []),
    )
    .unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
