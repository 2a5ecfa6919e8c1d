//! Scores group-level bias with the JSD measure, builds KNN neighborhoods
//! over group embeddings and keeps the groups with the largest causal
//! effect.

use pairdebias::alignment::{
    build_knn, causal_effect, group_embeddings, jsd, target_distribution, select_aligned,
};
use pairdebias::encoder::{EncoderConfig, EncoderModel};
use pairdebias::pipeline::corpus_tokenizer;
use pairdebias::synthetic::gender_setup;

pub fn run_example() -> pairdebias::Result<()> {
    println!("jsd([1,0],[0,1]) = {:.6} (ln 2 = {:.6})", jsd(&[1.0, 0.0], &[0.0, 1.0])?, 2f64.ln());

    let setup = gender_setup(6, 4, 0)?;
    let corpus = &setup.corpus;
    let model = EncoderModel::new(
        EncoderConfig {
            d_model: 16,
            heads: 2,
            ..EncoderConfig::default()
        },
        corpus_tokenizer(corpus, []),
    )?;

    let g = &corpus.groups[0];
    for v in &g.variants {
        let r = target_distribution(&model, &v.text, &v.attribute, &corpus.word_lists, 1.0)?;
        let shown: Vec<String> = r.iter().map(|p| format!("{p:.3}")).collect();
        println!("{:<4} {}", v.attribute, shown.join(" "));
    }

    let emb = group_embeddings(&model, corpus)?;
    let nbs = build_knn(&emb, 3, 1.0)?;
    let nb = &nbs[&g.group_id];
    println!("neighbors of {}: {:?} weights {:?}", g.group_id, nb.neighbor_ids, nb.weights);

    let report = causal_effect(&model, corpus, &nbs, 1.0)?;
    let (kept, filtered) = select_aligned(&report.deltas(), 0.5)?;
    println!(
        "delta total {:.6}; kept {} groups, filtered {}",
        report.delta_total,
        kept.len(),
        filtered.len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> pairdebias::Result<()> {
    run_example()
}
