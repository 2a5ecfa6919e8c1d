//! Bias and expressiveness measurements: SEAT effect size, StereoSet-style
//! LM/SS/ICAT, CrowS-Pairs-style score, pseudo-perplexity and a 2-D PCA
//! projection of word embeddings.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::encoder::tensor;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

/// Template used to embed single words for SEAT specs and projections.
pub const WORD_TEMPLATE: &str = "this is a {word} .";

pub fn word_sentence(word: &str) -> String {
    WORD_TEMPLATE.replace("{word}", word)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatSpec {
    #[serde(default)]
    pub name: String,
    pub target_x: Vec<String>,
    pub target_y: Vec<String>,
    pub attribute_a: Vec<String>,
    pub attribute_b: Vec<String>,
}

impl SeatSpec {
    /// Builds a spec from bare words via [`WORD_TEMPLATE`].
    pub fn from_words(name: &str, x: &[&str], y: &[&str], a: &[&str], b: &[&str]) -> Self {
        let wrap = |ws: &[&str]| ws.iter().map(|w| word_sentence(w)).collect();
        SeatSpec {
            name: name.into(),
            target_x: wrap(x),
            target_y: wrap(y),
            attribute_a: wrap(a),
            attribute_b: wrap(b),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, s) in [
            ("target_x", &self.target_x),
            ("target_y", &self.target_y),
            ("attribute_a", &self.attribute_a),
            ("attribute_b", &self.attribute_b),
        ] {
            if s.is_empty() {
                return Err(Error::Validation(format!("SEAT set {n} is empty")));
            }
        }
        Ok(())
    }
}

fn mean_cos(w: &[f64], set: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for a in set {
        total += tensor::cosine(w, a)
            .ok_or_else(|| Error::Numeric("zero-norm SEAT embedding".into()))?;
    }
    Ok(total / set.len() as f64)
}

/// Effect size from precomputed embeddings, with a population standard
/// deviation in the denominator.
pub fn seat_effect_size_from_embeddings(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
) -> Result<f64> {
    if x.is_empty() || y.is_empty() || a.is_empty() || b.is_empty() {
        return Err(Error::Validation("SEAT sets must be nonempty".into()));
    }
    let s = |w: &Vec<f64>| -> Result<f64> { Ok(mean_cos(w, a)? - mean_cos(w, b)?) };
    let sx = x.iter().map(s).collect::<Result<Vec<_>>>()?;
    let sy = y.iter().map(s).collect::<Result<Vec<_>>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all: Vec<f64> = sx.iter().chain(&sy).copied().collect();
    let mu = mean(&all);
    let var = all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / all.len() as f64;
    if var <= f64::EPSILON * f64::EPSILON {
        return Err(Error::Numeric(
            "association scores have zero variance; effect size undefined".into(),
        ));
    }
    Ok((mean(&sx) - mean(&sy)) / var.sqrt())
}

pub fn seat_effect_size(model: &EncoderModel, spec: &SeatSpec) -> Result<f64> {
    spec.validate()?;
    let embed = |set: &[String]| -> Result<Vec<Vec<f64>>> {
        set.par_iter().map(|s| model.sentence_embedding(s)).collect()
    };
    seat_effect_size_from_embeddings(
        &embed(&spec.target_x)?,
        &embed(&spec.target_y)?,
        &embed(&spec.attribute_a)?,
        &embed(&spec.attribute_b)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoItem {
    pub id: String,
    pub stereotype: String,
    pub anti_stereotype: String,
    pub unrelated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowsPair {
    pub id: String,
    pub sent_more: String,
    pub sent_less: String,
}

/// `LM · min(SS, 100 − SS) / 50`
pub fn icat(lm: f64, ss: f64) -> f64 {
    lm * ss.min(100.0 - ss) / 50.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoScores {
    pub lm: f64,
    pub ss: f64,
    pub icat: f64,
    pub ties: usize,
}

/// 1 for a win, 0.5 for a tie, 0 otherwise.
fn outscore(a: f64, b: f64, ties: &mut usize) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        *ties += 1;
        0.5
    } else {
        0.0
    }
}

/// LM/SS/ICAT from per-item `(stereotype, anti, unrelated)` scores.
pub fn stereoset_from_scores(scores: &[(f64, f64, f64)]) -> Result<StereoScores> {
    if scores.is_empty() {
        return Err(Error::Validation("no StereoSet items".into()));
    }
    let n = scores.len() as f64;
    let mut ties = 0;
    let mut ss = 0.0;
    let mut lm = 0.0;
    for &(s, a, u) in scores {
        ss += outscore(s, a, &mut ties);
        lm += (outscore(s, u, &mut ties) + outscore(a, u, &mut ties)) / 2.0;
    }
    if ties > 0 {
        log::info!("{ties} StereoSet score ties counted as half");
    }
    let (lm, ss) = (100.0 * lm / n, 100.0 * ss / n);
    Ok(StereoScores {
        lm,
        ss,
        icat: icat(lm, ss),
        ties,
    })
}

/// Pseudo-log-likelihood divided by token count.
pub fn normalized_pll(model: &EncoderModel, text: &str) -> Result<f64> {
    let terms = model.pll_terms(text)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

pub fn stereoset_scores(model: &EncoderModel, items: &[StereoItem]) -> Result<StereoScores> {
    let scores = items
        .par_iter()
        .map(|it| {
            Ok((
                normalized_pll(model, &it.stereotype)?,
                normalized_pll(model, &it.anti_stereotype)?,
                normalized_pll(model, &it.unrelated)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    stereoset_from_scores(&scores)
}

/// Percentage of `(more, less)` pairs where the stereotypical sentence
/// scores higher; ties count half.
pub fn crows_from_scores(scores: &[(f64, f64)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Validation("no CrowS pairs".into()));
    }
    let mut ties = 0;
    let wins: f64 = scores.iter().map(|&(m, l)| outscore(m, l, &mut ties)).sum();
    Ok(100.0 * wins / scores.len() as f64)
}

pub fn crows_score(model: &EncoderModel, pairs: &[CrowsPair]) -> Result<f64> {
    let scores = pairs
        .par_iter()
        .map(|p| Ok((normalized_pll(model, &p.sent_more)?, normalized_pll(model, &p.sent_less)?)))
        .collect::<Result<Vec<_>>>()?;
    crows_from_scores(&scores)
}

/// `exp(−mean per-token pseudo-log-likelihood)` over all tokens.
pub fn pseudo_perplexity<S: AsRef<str> + Sync>(model: &EncoderModel, sentences: &[S]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Validation("empty held-out set".into()));
    }
    let per: Vec<(f64, usize)> = sentences
        .par_iter()
        .map(|s| {
            let t = model.pll_terms(s.as_ref())?;
            Ok((t.iter().sum::<f64>(), t.len()))
        })
        .collect::<Result<_>>()?;
    let total: f64 = per.iter().map(|p| p.0).sum();
    let count: usize = per.iter().map(|p| p.1).sum();
    Ok((-total / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub word: String,
    pub category: String,
    pub x: f64,
    pub y: f64,
}

/// Top-2 principal-component coordinates. Each component's sign makes its
/// first nonzero loading positive; components with negligible variance
/// project to zero.
pub fn pca_2d(embeddings: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = embeddings.len();
    if n < 3 {
        return Err(Error::Validation("projection needs at least 3 words".into()));
    }
    let d = embeddings[0].len();
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| embeddings[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let scale = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(top > 1e-24 * scale.max(1.0)) || scale == 0.0 {
        return Err(Error::Numeric(
            "degenerate covariance: all embeddings are equal".into(),
        ));
    }
    let mut coords = vec![[0.0; 2]; n];
    for (c, &k) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[k] <= 1e-12 * top {
            continue;
        }
        let mut v = eig.eigenvectors.column(k).clone_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        let proj = &centered * v;
        for i in 0..n {
            coords[i][c] = proj[i];
        }
    }
    Ok(coords)
}

/// Projects `(word, category)` pairs through their in-template
/// representations.
pub fn export_projection(
    model: &EncoderModel,
    words: &[(String, String)],
) -> Result<Vec<ProjectionRow>> {
    let embeddings = words
        .iter()
        .map(|(w, _)| model.word_in_context_repr(&word_sentence(w), w))
        .collect::<Result<Vec<_>>>()?;
    let coords = pca_2d(&embeddings)?;
    Ok(words
        .iter()
        .zip(coords)
        .map(|((w, c), [x, y])| ProjectionRow {
            word: w.clone(),
            category: c.clone(),
            x,
            y,
        })
        .collect())
}

pub fn projection_csv(rows: &[ProjectionRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Validation(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Reads a JSONL fixture file.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))
        })
        .collect()
}

pub fn read_seat_specs(path: impl AsRef<Path>) -> Result<Vec<SeatSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // a single spec object or a list of them
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let specs = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|s| vec![s])
    }
    .map_err(|e| Error::json(path.display().to_string(), e))?;
    Ok(specs)
}

/// One model's metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub seat: Vec<(String, f64)>,
    pub seat_mean_abs: Option<f64>,
    pub stereoset: Option<StereoScores>,
    pub crows: Option<f64>,
    pub mean_d: Option<f64>,
    pub ppl: Option<f64>,
}

impl MetricValues {
    pub fn summary_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            f(self.seat_mean_abs),
            f(self.stereoset.map(|s| s.ss)),
            f(self.stereoset.map(|s| s.lm)),
            f(self.stereoset.map(|s| s.icat)),
            f(self.crows),
            f(self.mean_d),
            f(self.ppl)
        );
        out
    }
}
