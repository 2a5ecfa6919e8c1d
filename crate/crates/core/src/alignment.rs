//! Causal-effect alignment: the JSD bias measure `D`, KNN neighborhoods
//! computed with the frozen encoder, per-group causal effects and the split
//! into aligned (kept) and filtered groups.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, PairwiseGroup, WordLists};
use crate::encoder::tape::jsd_value;
use crate::encoder::tensor::{self, Tensor};
use crate::encoder::{Bound, EncoderModel, Tape, Var};
use crate::error::{Error, Result};

/// Neutral sentence each target word is embedded in to form its prototype.
pub const TARGET_TEMPLATE: &str = "it is about {target} .";

pub fn target_sentence(target: &str) -> String {
    TARGET_TEMPLATE.replace("{target}", target)
}

const NORMALIZATION_TOL: f64 = 1e-9;

/// Jensen-Shannon divergence in nats; `0·log 0` is taken as 0.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Validation(format!(
            "jsd length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Validation(format!("{name} has negative entries")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Validation(format!("{name} sums to {s}, not 1")));
        }
    }
    Ok(jsd_value(p, q))
}

/// Target-word prototype vectors placed on a tape.
pub struct Prototypes {
    vars: Vec<Var>,
}

impl Prototypes {
    /// Prototype of every target, in word-list order.
    pub fn on_tape(
        tape: &mut Tape<'_>,
        model: &EncoderModel,
        bound: &Bound,
        lists: &WordLists,
    ) -> Result<Self> {
        let vars = lists
            .targets
            .iter()
            .map(|t| model.word_repr_on_tape(tape, bound, &target_sentence(t), t))
            .collect::<Result<_>>()?;
        Ok(Prototypes { vars })
    }
}

/// `softmax_m(cos(w, t_m) / temperature)` on a tape.
pub fn target_distribution_on_tape(
    tape: &mut Tape<'_>,
    model: &EncoderModel,
    bound: &Bound,
    protos: &Prototypes,
    text: &str,
    attribute: &str,
    temperature: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    let w = model.word_repr_on_tape(tape, bound, text, attribute)?;
    let cos = protos
        .vars
        .iter()
        .map(|t| tape.cosine(w, *t))
        .collect::<Result<Vec<_>>>()?;
    let row = tape.stack(&cos);
    let scaled = tape.scale(row, 1.0 / temperature);
    Ok(tape.softmax_rows(scaled))
}

/// `D(x) = Σ_{i<j} JSD(R_i ‖ R_j)` for one group, on a tape.
pub fn bias_measure_on_tape(
    tape: &mut Tape<'_>,
    model: &EncoderModel,
    bound: &Bound,
    protos: &Prototypes,
    group: &PairwiseGroup,
    temperature: f64,
) -> Result<Var> {
    let dists = group
        .variants
        .iter()
        .map(|v| {
            target_distribution_on_tape(
                tape,
                model,
                bound,
                protos,
                &v.text,
                &v.attribute,
                temperature,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            terms.push(tape.jsd(dists[i], dists[j]));
        }
    }
    Ok(tape.sum(&terms))
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature {t} must be positive")))
    }
}

/// Distribution over targets for one attribute word in context.
pub fn target_distribution(
    model: &EncoderModel,
    text: &str,
    attribute: &str,
    lists: &WordLists,
    temperature: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let protos = Prototypes::on_tape(&mut tape, model, &bound, lists)?;
    let r = target_distribution_on_tape(
        &mut tape, model, &bound, &protos, text, attribute, temperature,
    )?;
    Ok(tape.value(r).data.clone())
}

/// Softmax of `cosines / temperature`.
pub fn distribution_from_cosines(cosines: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let scaled: Vec<f64> = cosines.iter().map(|c| c / temperature).collect();
    Ok(tensor::softmax(&scaled))
}

/// Bias measure `D` of one group under `model`.
pub fn bias_measure(
    model: &EncoderModel,
    group: &PairwiseGroup,
    lists: &WordLists,
    temperature: f64,
) -> Result<f64> {
    Ok(bias_measures(model, std::slice::from_ref(group), lists, temperature)?[0])
}

/// `D` for many groups, sharing one set of target prototypes. Groups are
/// scored in parallel; output order follows `groups`.
pub fn bias_measures(
    model: &EncoderModel,
    groups: &[PairwiseGroup],
    lists: &WordLists,
    temperature: f64,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let proto_values: Vec<Tensor> = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let protos = Prototypes::on_tape(&mut tape, model, &bound, lists)?;
        protos.vars.iter().map(|v| tape.value(*v).clone()).collect()
    };
    groups
        .par_iter()
        .map(|g| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let protos = Prototypes {
                vars: proto_values.iter().map(|t| tape.constant_ref(t)).collect(),
            };
            let d = bias_measure_on_tape(&mut tape, model, &bound, &protos, g, temperature)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("group {}: {m}", g.group_id)),
                    other => other,
                })?;
            Ok(tape.scalar(d))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnNeighborhood {
    pub anchor_id: String,
    /// Position 0 is the anchor itself.
    pub neighbor_ids: Vec<String>,
    pub weights: Vec<f64>,
}

pub type Neighborhoods = BTreeMap<String, KnnNeighborhood>;

/// Group embedding: mean of the variants' mean-pooled sentence vectors.
pub fn group_embeddings(model: &EncoderModel, corpus: &Corpus) -> Result<BTreeMap<String, Vec<f64>>> {
    corpus
        .groups
        .par_iter()
        .map(|g| {
            let mut acc = vec![0.0; model.config.d_model];
            for v in &g.variants {
                for (a, x) in acc.iter_mut().zip(model.sentence_embedding(&v.text)?) {
                    *a += x;
                }
            }
            let n = g.variants.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok((g.group_id.clone(), acc))
        })
        .collect()
}

/// Exact cosine KNN with softmax weights over `{1} ∪ {cos(anchor, k)}`.
pub fn build_knn(
    embeddings: &BTreeMap<String, Vec<f64>>,
    k: usize,
    temperature: f64,
) -> Result<Neighborhoods> {
    check_temperature(temperature)?;
    if embeddings.len() < k + 1 {
        return Err(Error::Validation(format!(
            "need at least {} groups for K={k}, have {}",
            k + 1,
            embeddings.len()
        )));
    }
    let ids: Vec<&String> = embeddings.keys().collect();
    let vecs: Vec<&Vec<f64>> = embeddings.values().collect();
    let norms: Vec<f64> = vecs.iter().map(|v| tensor::norm(v)).collect();
    for (id, (v, n)) in ids.iter().zip(vecs.iter().zip(&norms)) {
        if *n == 0.0 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding of group {id} is zero or non-finite"
            )));
        }
    }
    let out: Vec<(String, KnnNeighborhood)> = (0..ids.len())
        .into_par_iter()
        .map(|a| {
            let mut sims: Vec<(f64, usize)> = (0..ids.len())
                .filter(|&b| b != a)
                .map(|b| (tensor::dot(vecs[a], vecs[b]) / (norms[a] * norms[b]), b))
                .collect();
            // ids are already sorted, so index order is group_id order
            sims.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            sims.truncate(k);
            let mut cos = vec![1.0];
            cos.extend(sims.iter().map(|s| s.0));
            let weights = distribution_from_cosines(&cos, temperature).expect("checked");
            let mut neighbor_ids = vec![ids[a].clone()];
            neighbor_ids.extend(sims.iter().map(|s| ids[s.1].clone()));
            (
                ids[a].clone(),
                KnnNeighborhood {
                    anchor_id: ids[a].clone(),
                    neighbor_ids,
                    weights,
                },
            )
        })
        .collect();
    Ok(out.into_iter().collect())
}

/// Neighborhoods of `k` seeded-random other groups with uniform weights.
pub fn random_neighborhoods(ids: &[String], k: usize, seed: u64) -> Result<Neighborhoods> {
    if ids.len() < k + 1 {
        return Err(Error::Validation(format!(
            "need at least {} groups for K={k}, have {}",
            k + 1,
            ids.len()
        )));
    }
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = 1.0 / (k + 1) as f64;
    Ok(sorted
        .iter()
        .map(|anchor| {
            let mut others: Vec<&String> = sorted.iter().copied().filter(|o| o != anchor).collect();
            others.shuffle(&mut rng);
            let mut neighbor_ids = vec![(*anchor).clone()];
            neighbor_ids.extend(others.into_iter().take(k).cloned());
            (
                (*anchor).clone(),
                KnnNeighborhood {
                    anchor_id: (*anchor).clone(),
                    neighbor_ids,
                    weights: vec![w; k + 1],
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAlignment {
    pub group_id: String,
    pub delta: f64,
    pub neighbors: Vec<String>,
    pub weights: Vec<f64>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub delta_total: f64,
    pub groups: Vec<GroupAlignment>,
    pub keep_fraction: Option<f64>,
    #[serde(rename = "K")]
    pub k: usize,
}

impl AlignmentReport {
    pub fn deltas(&self) -> BTreeMap<String, f64> {
        self.groups
            .iter()
            .map(|g| (g.group_id.clone(), g.delta))
            .collect()
    }

    pub fn kept_ids(&self) -> HashSet<String> {
        self.groups
            .iter()
            .filter(|g| g.kept)
            .map(|g| g.group_id.clone())
            .collect()
    }

    pub fn filtered_ids(&self) -> HashSet<String> {
        self.groups
            .iter()
            .filter(|g| !g.kept)
            .map(|g| g.group_id.clone())
            .collect()
    }

    pub fn neighborhoods(&self) -> Neighborhoods {
        self.groups
            .iter()
            .map(|g| {
                (
                    g.group_id.clone(),
                    KnnNeighborhood {
                        anchor_id: g.group_id.clone(),
                        neighbor_ids: g.neighbors.clone(),
                        weights: g.weights.clone(),
                    },
                )
            })
            .collect()
    }

    /// Marks `kept` from [`select_aligned`].
    pub fn apply_selection(&mut self, keep_fraction: f64) -> Result<()> {
        let (kept, _) = select_aligned(&self.deltas(), keep_fraction)?;
        let kept: HashSet<String> = kept.into_iter().collect();
        for g in &mut self.groups {
            g.kept = kept.contains(&g.group_id);
        }
        self.keep_fraction = Some(keep_fraction);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `Σ_k D(x^(n,k))·S_{n,k}` for one neighborhood.
pub fn weighted_effect(nb: &KnnNeighborhood, d_of: impl Fn(&str) -> f64) -> f64 {
    nb.neighbor_ids
        .iter()
        .zip(&nb.weights)
        .map(|(id, w)| d_of(id) * w)
        .sum()
}

/// `δ_n = Σ_k D(x^(n,k))·S_{n,k}` under the frozen model, and their sum.
/// Groups are reported in group_id order, all marked kept.
pub fn causal_effect(
    model_0: &EncoderModel,
    corpus: &Corpus,
    neighborhoods: &Neighborhoods,
    temperature: f64,
) -> Result<AlignmentReport> {
    let index = corpus.index();
    let mut needed: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for g in &corpus.groups {
        let nb = neighborhoods.get(&g.group_id).ok_or_else(|| {
            Error::Validation(format!("no neighborhood for group {}", g.group_id))
        })?;
        for id in &nb.neighbor_ids {
            let i = *index.get(id.as_str()).ok_or_else(|| {
                Error::Validation(format!("neighbor {id} is not in the corpus"))
            })?;
            if seen.insert(i) {
                needed.push(i);
            }
        }
    }
    let groups: Vec<PairwiseGroup> = needed.iter().map(|&i| corpus.groups[i].clone()).collect();
    let d_values = bias_measures(model_0, &groups, &corpus.word_lists, temperature)?;
    let d_of: HashMap<&str, f64> = groups
        .iter()
        .zip(&d_values)
        .map(|(g, d)| (g.group_id.as_str(), *d))
        .collect();

    let mut ordered: Vec<&PairwiseGroup> = corpus.groups.iter().collect();
    ordered.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    let mut report_groups = Vec::with_capacity(ordered.len());
    let mut k = 0;
    for g in ordered {
        let nb = &neighborhoods[&g.group_id];
        k = k.max(nb.neighbor_ids.len() - 1);
        let delta = weighted_effect(nb, |id| d_of[id]);
        report_groups.push(GroupAlignment {
            group_id: g.group_id.clone(),
            delta,
            neighbors: nb.neighbor_ids.clone(),
            weights: nb.weights.clone(),
            kept: true,
        });
    }
    let delta_total = report_groups.iter().map(|g| g.delta).sum();
    Ok(AlignmentReport {
        delta_total,
        groups: report_groups,
        keep_fraction: None,
        k,
    })
}

/// Keeps the `⌈keep_fraction·N⌉` groups with the largest δ (ties by
/// group_id). Returns (kept, filtered), each in rank order.
pub fn select_aligned(
    deltas: &BTreeMap<String, f64>,
    keep_fraction: f64,
) -> Result<(Vec<String>, Vec<String>)> {
    let keep = corpus::keep_count(keep_fraction, deltas.len())?;
    let mut ranked: Vec<(&String, f64)> = deltas.iter().map(|(k, v)| (k, *v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let ids: Vec<String> = ranked.into_iter().map(|(k, _)| k.clone()).collect();
    let filtered = ids[keep..].to_vec();
    let mut kept = ids;
    kept.truncate(keep);
    Ok((kept, filtered))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn jsd_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert!(close(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2f64.ln(), 1e-12));
        // direct evaluation of the definition
        let (a, b) = ([0.5, 0.5], [0.25, 0.75]);
        let m = [0.375, 0.625];
        let kl = |x: &[f64], m: &[f64]| -> f64 {
            x.iter().zip(m).map(|(xi, mi)| xi * (xi / mi).ln()).sum()
        };
        let oracle = 0.5 * kl(&a, &m) + 0.5 * kl(&b, &m);
        assert!(close(oracle, 0.03382, 1e-5), "{oracle}");
        assert!(close(jsd(&a, &b).unwrap(), oracle, 1e-12));
    }

    #[test]
    fn jsd_rejects_bad_input() {
        assert!(jsd(&[0.5, 0.5], &[1.0]).is_err());
        assert!(jsd(&[0.6, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn softmax_of_cosines() {
        let p = distribution_from_cosines(&[0.3, 0.3, 0.3, 0.3], 1.0).unwrap();
        assert!(p.iter().all(|v| close(*v, 0.25, 1e-15)));
        let p = distribution_from_cosines(&[1.0, -1.0, 0.5, 0.0, 0.2], 1e6).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-3));
        let e = std::f64::consts::E;
        let p = distribution_from_cosines(&[1.0, 0.0], 1.0).unwrap();
        assert!(close(p[0], e / (e + 1.0), 1e-12) && close(p[0], 0.7311, 1e-4));
        assert!(close(p[1], 1.0 / (e + 1.0), 1e-12) && close(p[1], 0.2689, 1e-4));
        assert!(distribution_from_cosines(&[1.0], 0.0).is_err());
    }

    fn emb(pairs: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    #[test]
    fn knn_examples() {
        let e = emb(&[("a", &[1.0, 0.0]), ("b", &[0.7071, 0.7071]), ("c", &[0.0, 1.0])]);
        let zero = build_knn(&e, 0, 1.0).unwrap();
        for nb in zero.values() {
            assert_eq!(nb.neighbor_ids, vec![nb.anchor_id.clone()]);
            assert_eq!(nb.weights, vec![1.0]);
        }
        let two = build_knn(&e, 2, 1.0).unwrap();
        let a = &two["a"];
        assert_eq!(a.neighbor_ids, vec!["a", "b", "c"]);
        for (w, expect) in a.weights.iter().zip([0.4730, 0.3529, 0.1740]) {
            assert!(close(*w, expect, 1e-3), "{:?}", a.weights);
        }
        assert!(build_knn(&e, 3, 1.0).is_err());

        let same = emb(&[("x", &[1.0, 2.0]), ("y", &[1.0, 2.0]), ("z", &[1.0, 2.0])]);
        for nb in build_knn(&same, 2, 1.0).unwrap().values() {
            assert!(nb.weights.iter().all(|w| close(*w, 1.0 / 3.0, 1e-12)));
        }
    }

    #[test]
    fn knn_rejects_zero_embedding() {
        let e = emb(&[("a", &[0.0, 0.0]), ("b", &[1.0, 0.0])]);
        assert!(matches!(build_knn(&e, 1, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn random_neighborhoods_are_uniform_and_seeded() {
        let ids: Vec<String> = (0..10).map(|i| format!("g{i}")).collect();
        let a = random_neighborhoods(&ids, 3, 7).unwrap();
        assert_eq!(a, random_neighborhoods(&ids, 3, 7).unwrap());
        for nb in a.values() {
            assert_eq!(nb.neighbor_ids[0], nb.anchor_id);
            assert_eq!(nb.neighbor_ids.len(), 4);
            assert!(!nb.neighbor_ids[1..].contains(&nb.anchor_id));
            assert!(nb.weights.iter().all(|w| *w == 0.25));
        }
    }

    #[test]
    fn weighted_effect_arithmetic() {
        let nb = KnnNeighborhood {
            anchor_id: "a".into(),
            neighbor_ids: vec!["a".into(), "b".into()],
            weights: vec![0.6, 0.4],
        };
        let d = |id: &str| if id == "a" { 0.2 } else { 0.4 };
        assert!(close(weighted_effect(&nb, d), 0.28, 1e-15));
    }

    #[test]
    fn selection_examples() {
        let d: BTreeMap<String, f64> = [("a", 0.9), ("b", 0.1), ("c", 0.5)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let (kept, filtered) = select_aligned(&d, 2.0 / 3.0).unwrap();
        assert_eq!(kept, vec!["a", "c"]);
        assert_eq!(filtered, vec!["b"]);
        let (kept, filtered) = select_aligned(&d, 1.0).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(filtered.is_empty());
        assert!(select_aligned(&d, 0.0).is_err());

        let zero: BTreeMap<String, f64> = [("a0", 0.0), ("z9", 1e-12)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let (kept, _) = select_aligned(&zero, 0.5).unwrap();
        assert_eq!(kept, vec!["z9"]);
    }
}
