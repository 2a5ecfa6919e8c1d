use pairdebias::encoder::{EncoderConfig, EncoderModel, Tokenizer, TOKEN_EMBEDDING};
use pairdebias::metrics::{
    crows_from_scores, crows_score, export_projection, icat, projection_csv, pseudo_perplexity,
    seat_effect_size_from_embeddings, stereoset_from_scores, stereoset_scores, CrowsPair, StereoItem,
};
use proptest::prelude::*;

fn vecs(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), n)
}

fn model(texts: &[&str]) -> EncoderModel {
    EncoderModel::new(
        EncoderConfig {
            d_model: 16,
            heads: 2,
            seed: 4,
            ..EncoderConfig::default()
        },
        Tokenizer::build(texts.iter().copied()),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seat_symmetries(x in vecs(1..5), y in vecs(1..5), a in vecs(1..4), b in vecs(1..4), c in 0.01f64..100.0) {
        let Ok(d) = seat_effect_size_from_embeddings(&x, &y, &a, &b) else { return Ok(()) };
        let swapped = seat_effect_size_from_embeddings(&x, &y, &b, &a).unwrap();
        prop_assert!((d + swapped).abs() < 1e-9);
        let scale = |s: &[Vec<f64>]| s.iter().map(|v| v.iter().map(|e| e * c).collect()).collect::<Vec<Vec<f64>>>();
        let scaled = seat_effect_size_from_embeddings(&scale(&x), &scale(&y), &scale(&a), &scale(&b)).unwrap();
        prop_assert!((d - scaled).abs() < 1e-9);
        if let Ok(same) = seat_effect_size_from_embeddings(&x, &x, &a, &b) {
            prop_assert!(same.abs() < 1e-9);
        }
    }

    #[test]
    fn stereoset_counts_match_a_direct_tally(scores in proptest::collection::vec((0i32..4, 0i32..4, 0i32..4), 1..40)) {
        let s: Vec<(f64, f64, f64)> = scores.iter().map(|&(a, b, c)| (a as f64, b as f64, c as f64)).collect();
        let out = stereoset_from_scores(&s).unwrap();
        let win = |x: i32, y: i32| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        let n = scores.len() as f64;
        let ss = 100.0 * scores.iter().map(|&(a, b, _)| win(a, b)).sum::<f64>() / n;
        let lm = 100.0 * scores.iter().map(|&(a, b, u)| (win(a, u) + win(b, u)) / 2.0).sum::<f64>() / n;
        prop_assert!((out.ss - ss).abs() < 1e-9 && (out.lm - lm).abs() < 1e-9);
        prop_assert!((out.icat - lm * ss.min(100.0 - ss) / 50.0).abs() < 1e-9);
    }

    #[test]
    fn icat_identity(lm in 0.0f64..=100.0, ss in 0.0f64..=100.0) {
        let v = icat(lm, ss);
        prop_assert!((v - icat(lm, 100.0 - ss)).abs() < 1e-9);
        prop_assert!(v >= 0.0 && v <= lm + 1e-12);
        prop_assert!((v - lm * ss.min(100.0 - ss) / 50.0).abs() < 1e-12);
    }
}

#[test]
fn ideal_and_symmetric_cases() {
    assert_eq!(icat(100.0, 50.0), 100.0);
    assert_eq!(crows_from_scores(&[(1.0, 1.0); 7]).unwrap(), 50.0);
    assert_eq!(crows_from_scores(&[(2.0, 1.0), (2.0, 1.0), (1.0, 2.0), (1.0, 2.0)]).unwrap(), 50.0);
    assert_eq!(crows_from_scores(&[(2.0, 1.0); 4]).unwrap(), 100.0);
}

#[test]
fn attribute_symmetric_sentences_score_fifty() {
    let m = model(&["the nurse said he was late .", "a cat sat on the mat ."]);
    let pairs = vec![CrowsPair {
        id: "p".into(),
        sent_more: "the nurse said he was late .".into(),
        sent_less: "the nurse said he was late .".into(),
    }];
    assert_eq!(crows_score(&m, &pairs).unwrap(), 50.0);
    let items = vec![StereoItem {
        id: "s".into(),
        stereotype: "the nurse said he was late .".into(),
        anti_stereotype: "the nurse said he was late .".into(),
        unrelated: "a cat sat on the mat .".into(),
    }];
    assert_eq!(stereoset_scores(&m, &items).unwrap().ss, 50.0);
}

#[test]
fn uniform_logits_give_vocabulary_sized_perplexity() {
    let mut m = model(&["a b c d e f g"]);
    assert_eq!(m.tokenizer.len(), 10);
    let bias = m.mlm_bias_index();
    m.params_mut()[TOKEN_EMBEDDING].data.iter_mut().for_each(|v| *v = 0.0);
    m.params_mut()[bias].data.iter_mut().for_each(|v| *v = 0.0);
    let ppl = pseudo_perplexity(&m, &["a b c", "g f e d"]).unwrap();
    assert!((ppl - 10.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn perplexity_ignores_sentence_order_and_is_at_least_one() {
    let texts = ["he is a boss .", "she met the boss twice .", "the pilot landed ."];
    let m = model(&texts);
    let a = pseudo_perplexity(&m, &texts).unwrap();
    let b = pseudo_perplexity(&m, &[texts[2], texts[0], texts[1]]).unwrap();
    assert!((a - b).abs() < 1e-9 * a);
    assert!(a >= 1.0);
}

#[test]
fn projection_has_one_row_per_word_and_is_deterministic() {
    let words = ["he", "she", "man", "woman", "nurse", "pilot"];
    let sentences: Vec<String> = words.iter().map(|w| format!("this is a {w} .")).collect();
    let m = model(&sentences.iter().map(String::as_str).collect::<Vec<_>>());
    let pairs: Vec<(String, String)> = words.iter().map(|w| (w.to_string(), "x".to_string())).collect();
    let rows = export_projection(&m, &pairs).unwrap();
    assert_eq!(rows.len(), words.len());
    let csv = projection_csv(&rows).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "word,category,x,y");
    assert_eq!(csv.lines().count(), words.len() + 1);
    assert_eq!(csv, projection_csv(&export_projection(&m, &pairs).unwrap()).unwrap());
}
