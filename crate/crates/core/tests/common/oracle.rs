//! Direct, loop-by-loop evaluation of the bias measure and the KNN causal
//! effect, sharing no code with the library beyond the encoder itself.

use std::collections::BTreeMap;

use pairdebias::alignment::target_sentence;
use pairdebias::corpus::{Corpus, PairwiseGroup};
use pairdebias::encoder::EncoderModel;

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn naive_jsd(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

pub fn naive_d(model: &EncoderModel, corpus: &Corpus, g: &PairwiseGroup, t: f64) -> f64 {
    let protos: Vec<Vec<f64>> = corpus
        .word_lists
        .targets
        .iter()
        .map(|w| model.word_in_context_repr(&target_sentence(w), w).unwrap())
        .collect();
    let dists: Vec<Vec<f64>> = g
        .variants
        .iter()
        .map(|v| {
            let w = model.word_in_context_repr(&v.text, &v.attribute).unwrap();
            let c: Vec<f64> = protos.iter().map(|p| cos(&w, p) / t).collect();
            softmax(&c)
        })
        .collect();
    let mut d = 0.0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            d += naive_jsd(&dists[i], &dists[j]);
        }
    }
    d
}

pub fn naive_embedding(model: &EncoderModel, g: &PairwiseGroup) -> Vec<f64> {
    let mut acc = vec![0.0; model.config.d_model];
    for v in &g.variants {
        let h = model.encode(&v.text).unwrap();
        for r in 0..h.rows {
            for (a, x) in acc.iter_mut().zip(h.row(r)) {
                *a += x / (h.rows * g.variants.len()) as f64;
            }
        }
    }
    acc
}

/// Term-by-term evaluation of every δ and of Δ.
pub fn brute_force(model: &EncoderModel, corpus: &Corpus, k: usize, t: f64) -> (BTreeMap<String, f64>, f64) {
    let emb: Vec<(String, Vec<f64>)> = corpus
        .groups
        .iter()
        .map(|g| (g.group_id.clone(), naive_embedding(model, g)))
        .collect();
    let d: BTreeMap<&str, f64> = corpus
        .groups
        .iter()
        .map(|g| (g.group_id.as_str(), naive_d(model, corpus, g, t)))
        .collect();
    let mut deltas = BTreeMap::new();
    for (id, e) in &emb {
        let mut others: Vec<(f64, &String)> =
            emb.iter().filter(|(o, _)| o != id).map(|(o, v)| (cos(e, v), o)).collect();
        others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        others.truncate(k);
        let mut sims = vec![1.0 / t];
        sims.extend(others.iter().map(|o| o.0 / t));
        let w = softmax(&sims);
        let mut delta = w[0] * d[id.as_str()];
        for (wk, (_, o)) in w[1..].iter().zip(&others) {
            delta += wk * d[o.as_str()];
        }
        deltas.insert(id.clone(), delta);
    }
    let total = deltas.values().sum();
    (deltas, total)
}

