//! SEAT effect size, StereoSet-style LM/SS/ICAT, a CrowS-style score,
//! pseudo-perplexity and a 2-D projection for an untrained encoder.

use pairdebias::encoder::{EncoderConfig, EncoderModel, Tokenizer};
use pairdebias::metrics::{
    crows_score, export_projection, icat, projection_csv, pseudo_perplexity, read_jsonl,
    read_seat_specs, seat_effect_size, stereoset_scores, CrowsPair, StereoItem,
};

pub fn run_example() -> pairdebias::Result<()> {
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let items: Vec<StereoItem> = read_jsonl(format!("{data}/stereoset_gender.jsonl"))?;
    let pairs: Vec<CrowsPair> = read_jsonl(format!("{data}/crows_gender.jsonl"))?;
    let specs = read_seat_specs(format!("{data}/seat_gender.json"))?;

    let mut texts: Vec<String> = Vec::new();
    for it in &items {
        texts.extend([it.stereotype.clone(), it.anti_stereotype.clone(), it.unrelated.clone()]);
    }
    for p in &pairs {
        texts.extend([p.sent_more.clone(), p.sent_less.clone()]);
    }
    for s in &specs {
        texts.extend(s.target_x.iter().chain(&s.target_y).chain(&s.attribute_a).chain(&s.attribute_b).cloned());
    }
    let model = EncoderModel::new(
        EncoderConfig {
            d_model: 16,
            heads: 2,
            ..EncoderConfig::default()
        },
        Tokenizer::build(texts.iter().map(String::as_str)),
    )?;

    for s in &specs {
        println!("SEAT {}: {:+.4}", s.name, seat_effect_size(&model, s)?);
    }
    let scores = stereoset_scores(&model, &items[..10])?;
    println!("LM {:.1} SS {:.1} ICAT {:.2}", scores.lm, scores.ss, scores.icat);
    println!("ICAT(84.17, 60.28) = {:.2}", icat(84.17, 60.28));
    println!("CrowS {:.1}", crows_score(&model, &pairs[..10])?);
    println!("pseudo-perplexity {:.2}", pseudo_perplexity(&model, &texts[..5])?);

    let words: Vec<(String, String)> = ["he", "she", "man", "woman", "nurse", "engineer"]
        .iter()
        .zip(["m", "f", "m", "f", "t", "t"])
        .map(|(w, c)| (w.to_string(), c.to_string()))
        .collect();
    print!("{}", projection_csv(&export_projection(&model, &words)?)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pairdebias::Result<()> {
    run_example()
}
