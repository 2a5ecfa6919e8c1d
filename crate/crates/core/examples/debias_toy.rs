//! Plants a gender association with skewed masked-LM pretraining, then
//! removes it with the bias and representation-preserving losses.

use pairdebias::alignment::{build_knn, causal_effect, group_embeddings};
use pairdebias::encoder::{EncoderConfig, EncoderModel};
use pairdebias::pipeline::corpus_tokenizer;
use pairdebias::synthetic::gender_setup;
use pairdebias::training::{pretrain, train, PretrainConfig, TrainConfig, TrainData};

pub fn run_example() -> pairdebias::Result<()> {
    let setup = gender_setup(8, 5, 0)?;
    let corpus = &setup.corpus;
    let mut model = EncoderModel::new(
        EncoderConfig {
            d_model: 32,
            heads: 2,
            ..EncoderConfig::default()
        },
        corpus_tokenizer(corpus, []),
    )?;
    let losses = pretrain(
        &mut model,
        &setup.pretrain_sentences,
        &PretrainConfig {
            epochs: 6,
            ..PretrainConfig::default()
        },
    )?;
    println!("pretraining loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);

    let m0 = model.snapshot();
    let cfg = TrainConfig {
        k: 3,
        epochs: 3,
        ..TrainConfig::default()
    };
    let nbs = build_knn(&group_embeddings(&m0, corpus)?, cfg.k, cfg.knn_temperature)?;
    let mut report = causal_effect(&m0, corpus, &nbs, cfg.temperature)?;
    report.apply_selection(cfg.keep_fraction_align)?;
    let mut aligned: Vec<String> = report.kept_ids().into_iter().collect();
    aligned.sort();

    let data = TrainData {
        corpus,
        aligned: &aligned,
        neighborhoods: &nbs,
        held_out: &setup.held_out,
    };
    let (_, log) = train(m0.thaw(), &m0, &data, &cfg)?;
    print!("{}", log.to_csv());
    Ok(())
}

#[allow(dead_code)]
fn main() -> pairdebias::Result<()> {
    run_example()
}
