//! Skewed pretraining corpora: for a chosen subset of targets the first
//! attribute's variant is repeated more often than the others, so masked-LM
//! pretraining plants a measurable association.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, WordLists};
use crate::error::{Error, Result};
use crate::llm_gen::{generate_groups, GenerationConfig};

/// Fifty occupations for synthetic target lists.
pub const OCCUPATIONS: &[&str] = &[
    "boss", "nurse", "doctor", "engineer", "teacher", "pilot", "chef", "lawyer", "dancer",
    "farmer", "banker", "writer", "singer", "driver", "baker", "painter", "manager", "clerk",
    "soldier", "sailor", "surgeon", "scientist", "librarian", "plumber", "carpenter", "judge",
    "poet", "guard", "cashier", "designer", "architect", "dentist", "editor", "florist",
    "butcher", "tailor", "miner", "mechanic", "pharmacist", "programmer", "secretary",
    "receptionist", "janitor", "accountant", "professor", "firefighter", "captain", "student",
    "waiter", "hairdresser",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewConfig {
    /// Every `skew_stride`-th target (starting at 0) is skewed.
    pub skew_stride: usize,
    /// Copies of the first attribute's variant per group for skewed targets.
    pub skew_ratio: usize,
    /// In group_id order, every `held_out_every`-th group stays out of
    /// pretraining and forms the held-out set. 0 disables the split.
    pub held_out_every: usize,
}

impl Default for SkewConfig {
    fn default() -> Self {
        SkewConfig {
            skew_stride: 2,
            skew_ratio: 4,
            held_out_every: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SkewedSetup {
    pub corpus: Corpus,
    pub skewed_targets: BTreeSet<String>,
    pub pretrain_sentences: Vec<String>,
    pub held_out: Vec<String>,
}

/// Splits `corpus` into a skewed pretraining text and held-out sentences.
pub fn skew(corpus: Corpus, cfg: &SkewConfig) -> Result<SkewedSetup> {
    if cfg.skew_stride == 0 || cfg.skew_ratio == 0 {
        return Err(Error::Config("skew_stride and skew_ratio must be positive".into()));
    }
    let skewed_targets: BTreeSet<String> = corpus
        .word_lists
        .targets
        .iter()
        .step_by(cfg.skew_stride)
        .cloned()
        .collect();
    let mut ordered: Vec<_> = corpus.groups.iter().collect();
    ordered.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    let mut pretrain_sentences = Vec::new();
    let mut held_out = Vec::new();
    for (i, g) in ordered.into_iter().enumerate() {
        if cfg.held_out_every > 0 && i % cfg.held_out_every == cfg.held_out_every - 1 {
            held_out.extend(g.variants.iter().map(|v| v.text.clone()));
            continue;
        }
        for v in &g.variants {
            let copies = if v.attribute_index == 0 && skewed_targets.contains(&g.target) {
                cfg.skew_ratio
            } else {
                1
            };
            pretrain_sentences.extend(std::iter::repeat_n(v.text.clone(), copies));
        }
    }
    Ok(SkewedSetup {
        corpus,
        skewed_targets,
        pretrain_sentences,
        held_out,
    })
}

/// Offline-generated `(he, she)` corpus over `n_targets` occupations with
/// the default skew.
pub fn gender_setup(n_targets: usize, sentences_per_prompt: usize, seed: u64) -> Result<SkewedSetup> {
    if n_targets == 0 || n_targets > OCCUPATIONS.len() {
        return Err(Error::Config(format!(
            "n_targets must be in 1..={}",
            OCCUPATIONS.len()
        )));
    }
    let lists = WordLists::new(
        vec![vec!["he".into(), "she".into()]],
        OCCUPATIONS[..n_targets].iter().map(|s| s.to_string()).collect(),
    )?;
    let gen = GenerationConfig {
        sentences_per_prompt,
        seed,
        ..GenerationConfig::default()
    };
    let corpus = generate_groups(&lists, &gen)?;
    skew(corpus, &SkewConfig::default())
}
