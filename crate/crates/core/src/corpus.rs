//! Word lists, pairwise sentence groups, toxicity filtering and
//! counterfactual attribute swaps.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

/// Attribute d-tuples (e.g. `(he, she)`) and the neutral target words that
/// should sit at a uniform distance from every member of a tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordLists {
    pub attributes: Vec<Vec<String>>,
    pub targets: Vec<String>,
}

impl WordLists {
    /// Lowercases every word and checks the list invariants.
    pub fn new(attributes: Vec<Vec<String>>, targets: Vec<String>) -> Result<Self> {
        let lists = WordLists {
            attributes: attributes
                .into_iter()
                .map(|t| t.into_iter().map(|w| w.trim().to_lowercase()).collect())
                .collect(),
            targets: targets
                .into_iter()
                .map(|w| w.trim().to_lowercase())
                .collect(),
        };
        lists.validate()?;
        Ok(lists)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            attributes: Vec<Vec<String>>,
            targets: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(json).map_err(|e| Error::json("word lists", e))?;
        WordLists::new(raw.attributes, raw.targets)
    }

    /// Tuple arity.
    pub fn d(&self) -> usize {
        self.attributes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.attributes.first() else {
            return Err(Error::Validation("no attribute tuples".into()));
        };
        let d = first.len();
        if d < 2 {
            return Err(Error::Validation(format!(
                "attribute tuple {first:?} has arity {d}, need at least 2"
            )));
        }
        let mut attribute_words = HashSet::new();
        for tuple in &self.attributes {
            if tuple.len() != d {
                return Err(Error::Validation(format!(
                    "ragged attribute tuple {tuple:?}: expected {d} words, found {}",
                    tuple.len()
                )));
            }
            let mut seen = HashSet::new();
            for w in tuple {
                if w.is_empty() {
                    return Err(Error::Validation(format!("empty word in tuple {tuple:?}")));
                }
                if !seen.insert(w) {
                    return Err(Error::Validation(format!(
                        "duplicate word \"{w}\" within attribute tuple {tuple:?}"
                    )));
                }
                attribute_words.insert(w.as_str());
            }
        }
        if self.targets.is_empty() {
            return Err(Error::Validation("empty target list".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.targets {
            if t.is_empty() {
                return Err(Error::Validation("empty target word".into()));
            }
            if attribute_words.contains(t.as_str()) {
                return Err(Error::Validation(format!(
                    "target word \"{t}\" is also an attribute word"
                )));
            }
            if !seen.insert(t) {
                return Err(Error::Validation(format!("duplicate target word \"{t}\"")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("word lists serialize")
    }

    /// Index of the tuple whose `index`-th word is `word`.
    pub fn tuples_containing(&self, index: usize, word: &str) -> Vec<usize> {
        self.attributes
            .iter()
            .enumerate()
            .filter(|(_, t)| t.get(index).is_some_and(|w| w == word))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Reads and validates a word-list JSON file.
pub fn parse_word_lists(path: impl AsRef<Path>) -> Result<WordLists> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    WordLists::from_json(&json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub attribute_index: usize,
    pub attribute: String,
    pub text: String,
}

/// `d` sentences sharing one target word and differing only in the
/// attribute word (and the pronouns that agree with it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseGroup {
    pub group_id: String,
    pub target: String,
    pub variants: Vec<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toxicity: Option<Vec<f64>>,
}

impl PairwiseGroup {
    /// Variant for attribute index `i`. Only meaningful on validated groups.
    pub fn variant(&self, i: usize) -> &Variant {
        self.variants
            .iter()
            .find(|v| v.attribute_index == i)
            .expect("validated group has every attribute index")
    }

    /// Max over variant scores; one toxic variant poisons the group.
    pub fn group_toxicity(&self) -> Option<f64> {
        self.toxicity
            .as_ref()
            .map(|t| t.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Checks the group against `lists`, returning a human-readable reason
    /// on failure.
    pub fn check(&self, lists: &WordLists) -> std::result::Result<(), String> {
        let d = lists.d();
        if self.group_id.is_empty() {
            return Err("empty group_id".into());
        }
        let target = self.target.to_lowercase();
        if !lists.targets.contains(&target) {
            return Err(format!("unknown target word \"{}\"", self.target));
        }
        let mut by_index: Vec<Option<&Variant>> = vec![None; d];
        for v in &self.variants {
            if v.attribute_index >= d {
                return Err(format!("attribute index {} out of range", v.attribute_index));
            }
            if by_index[v.attribute_index].replace(v).is_some() {
                return Err(format!("duplicate attribute index {}", v.attribute_index));
            }
        }
        if let Some(missing) = by_index.iter().position(Option::is_none) {
            return Err(format!("missing attribute index {missing}"));
        }
        let variants: Vec<&Variant> = by_index.into_iter().flatten().collect();

        // the attributes must be one tuple of the word list, index by index
        let mut candidates: HashSet<usize> = (0..lists.attributes.len()).collect();
        for v in &variants {
            let hits: HashSet<usize> = lists
                .tuples_containing(v.attribute_index, &v.attribute.to_lowercase())
                .into_iter()
                .collect();
            candidates = candidates.intersection(&hits).copied().collect();
        }
        if candidates.is_empty() {
            let words: Vec<&str> = variants.iter().map(|v| v.attribute.as_str()).collect();
            return Err(format!("attributes {words:?} do not form a known tuple"));
        }

        for v in &variants {
            if !text::contains_word(&v.text, &v.attribute) {
                return Err(format!(
                    "variant {} lacks attribute word \"{}\"",
                    v.attribute_index, v.attribute
                ));
            }
            if !text::contains_word(&v.text, &target) {
                return Err(format!(
                    "variant {} lacks target word \"{}\"",
                    v.attribute_index, target
                ));
            }
        }
        if let Some(tox) = &self.toxicity {
            if tox.len() != d {
                return Err(format!("expected {d} toxicity scores, found {}", tox.len()));
            }
            if let Some(bad) = tox.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(format!("toxicity score {bad} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Sorts variants by attribute index and lowercases attribute/target
    /// words so that equal groups compare equal.
    fn normalize(&mut self) {
        self.target = self.target.to_lowercase();
        for v in &mut self.variants {
            v.attribute = v.attribute.to_lowercase();
        }
        self.variants.sort_by_key(|v| v.attribute_index);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub groups: Vec<PairwiseGroup>,
    pub word_lists: WordLists,
}

impl Corpus {
    /// Builds a corpus, rejecting the first group that violates an invariant.
    pub fn new(groups: Vec<PairwiseGroup>, word_lists: WordLists) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut normalized = Vec::with_capacity(groups.len());
        for mut g in groups {
            g.check(&word_lists)
                .map_err(|r| Error::Validation(format!("group {}: {r}", g.group_id)))?;
            if !ids.insert(g.group_id.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate group_id \"{}\"",
                    g.group_id
                )));
            }
            g.normalize();
            normalized.push(g);
        }
        Ok(Corpus {
            groups: normalized,
            word_lists,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, group_id: &str) -> Option<&PairwiseGroup> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    /// Keeps only the groups whose ids are in `ids`, preserving order.
    pub fn subset(&self, ids: &HashSet<String>) -> Corpus {
        Corpus {
            groups: self
                .groups
                .iter()
                .filter(|g| ids.contains(&g.group_id))
                .cloned()
                .collect(),
            word_lists: self.word_lists.clone(),
        }
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.groups
            .iter()
            .enumerate()
            .map(|(i, g)| (g.group_id.as_str(), i))
            .collect()
    }

    /// Every variant sentence, in group order.
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.groups
            .iter()
            .flat_map(|g| g.variants.iter().map(|v| v.text.as_str()))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let _ = writeln!(out, "{}", serde_json::to_string(g).expect("group serializes"));
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// A rejected corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    pub rejected: Vec<Rejection>,
}

impl Ingested {
    pub fn report_jsonl(&self) -> String {
        self.rejected
            .iter()
            .map(|r| serde_json::to_string(r).expect("rejection serializes") + "\n")
            .collect()
    }
}

/// Parses JSONL group lines; invalid lines are collected, not fatal.
/// Line numbers are 1-based.
pub fn ingest_str(jsonl: &str, lists: &WordLists) -> Ingested {
    let mut groups = Vec::new();
    let mut rejected = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in jsonl.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut group: PairwiseGroup = match serde_json::from_str(line) {
            Ok(g) => g,
            Err(e) => {
                rejected.push(Rejection {
                    line: line_no,
                    reason: format!("malformed json: {e}"),
                });
                continue;
            }
        };
        if let Err(reason) = group.check(lists) {
            rejected.push(Rejection {
                line: line_no,
                reason,
            });
            continue;
        }
        if !ids.insert(group.group_id.clone()) {
            rejected.push(Rejection {
                line: line_no,
                reason: format!("duplicate group_id \"{}\"", group.group_id),
            });
            continue;
        }
        group.normalize();
        groups.push(group);
    }
    Ingested {
        corpus: Corpus {
            groups,
            word_lists: lists.clone(),
        },
        rejected,
    }
}

pub fn ingest_groups(path: impl AsRef<Path>, lists: &WordLists) -> Result<Ingested> {
    let path = path.as_ref();
    let jsonl = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(ingest_str(&jsonl, lists))
}

/// `⌈fraction · n⌉`, tolerant of representation error in `fraction`.
pub fn keep_count(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep fraction {fraction} outside (0, 1]"
        )));
    }
    let raw = fraction * n as f64;
    Ok(((raw - 1e-9).ceil().max(0.0) as usize).min(n))
}

/// Keeps the `⌈keep_fraction · N⌉` least toxic groups, ordered by
/// (toxicity, group_id).
pub fn toxicity_filter(corpus: &Corpus, keep_fraction: f64) -> Result<Corpus> {
    let keep = keep_count(keep_fraction, corpus.len())?;
    let mut scored = Vec::with_capacity(corpus.len());
    for g in &corpus.groups {
        let tox = g.group_toxicity().ok_or_else(|| {
            Error::Validation(format!("group {} has no toxicity scores", g.group_id))
        })?;
        scored.push((tox, g));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.group_id.cmp(&b.1.group_id)));
    Ok(Corpus {
        groups: scored.into_iter().take(keep).map(|(_, g)| g.clone()).collect(),
        word_lists: corpus.word_lists.clone(),
    })
}

/// Directed pronoun rewrites applied alongside an attribute swap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounMap(pub Vec<(String, String)>);

impl Default for PronounMap {
    /// English male → female table.
    fn default() -> Self {
        PronounMap::from_pairs(&[
            ("he", "she"),
            ("his", "her"),
            ("him", "her"),
            ("himself", "herself"),
        ])
    }
}

impl PronounMap {
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        PronounMap(
            pairs
                .iter()
                .map(|(a, b)| (a.to_lowercase(), b.to_lowercase()))
                .collect(),
        )
    }

    pub fn empty() -> Self {
        PronounMap(Vec::new())
    }

    /// Opposite direction; when several sources share a target the first
    /// listed source wins (`her → his`).
    pub fn reversed(&self) -> Self {
        let mut seen = HashSet::new();
        PronounMap(
            self.0
                .iter()
                .filter(|(_, to)| seen.insert(to.clone()))
                .map(|(from, to)| (to.clone(), from.clone()))
                .collect(),
        )
    }

    /// Both directions at once, so a swap exchanges the two sides.
    pub fn symmetric(&self) -> Self {
        let mut out = self.0.clone();
        out.extend(self.reversed().0);
        let mut seen = HashSet::new();
        out.retain(|(from, _)| seen.insert(from.clone()));
        PronounMap(out)
    }

    fn lookup(&self, word: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(from, _)| from == word)
            .map(|(_, to)| to.as_str())
    }
}

fn match_case(original: &str, replacement: &str) -> String {
    let mut chars = original.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() => {
            let mut r = replacement.chars();
            match r.next() {
                Some(first) => first.to_uppercase().chain(r).collect(),
                None => String::new(),
            }
        }
        _ => replacement.to_string(),
    }
}

/// Replaces every token-boundary occurrence of `from_attr` with `to_attr`
/// and rewrites pronouns through `pronouns`, keeping a leading capital.
pub fn counterfactual_swap(
    text: &str,
    from_attr: &str,
    to_attr: &str,
    pronouns: &PronounMap,
) -> Result<String> {
    let from = from_attr.to_lowercase();
    let spans = text::spans(text);
    let present = spans
        .iter()
        .any(|s| s.word && text[s.start..s.end].to_lowercase() == from);
    if !present {
        return Err(Error::Validation(format!(
            "attribute word \"{from_attr}\" absent from \"{text}\""
        )));
    }
    let mut out = String::with_capacity(text.len() + 8);
    let mut cursor = 0;
    for s in spans.iter().filter(|s| s.word) {
        let original = &text[s.start..s.end];
        let lower = original.to_lowercase();
        let replacement = if lower == from {
            Some(to_attr)
        } else {
            pronouns.lookup(&lower)
        };
        if let Some(r) = replacement {
            out.push_str(&text[cursor..s.start]);
            out.push_str(&match_case(original, r));
            cursor = s.end;
        }
    }
    out.push_str(&text[cursor..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lists() -> WordLists {
        WordLists::new(
            vec![vec!["he".into(), "she".into()]],
            vec!["boss".into(), "captain".into()],
        )
        .unwrap()
    }

    fn group(id: &str, texts: &[&str]) -> PairwiseGroup {
        PairwiseGroup {
            group_id: id.into(),
            target: "boss".into(),
            variants: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Variant {
                    attribute_index: i,
                    attribute: ["he", "she"][i].into(),
                    text: (*t).into(),
                })
                .collect(),
            toxicity: None,
        }
    }

    #[test]
    fn word_list_examples() {
        let l = WordLists::from_json(r#"{"attributes":[["king","queen"]],"targets":["boss"]}"#)
            .unwrap();
        assert_eq!(l.d(), 2);
        let l = WordLists::from_json(
            r#"{"attributes":[["he","she"]],"targets":["captain","boss","professor"]}"#,
        )
        .unwrap();
        assert_eq!(l.targets, vec!["captain", "boss", "professor"]);

        let err = WordLists::from_json(r#"{"attributes":[["he","she","he"]],"targets":["x"]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate word \"he\""), "{err}");
    }

    #[test]
    fn word_list_errors_name_the_word() {
        let ragged = WordLists::from_json(
            r#"{"attributes":[["he","she"],["king"]],"targets":["boss"]}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(ragged.contains("king"), "{ragged}");
        let empty = WordLists::from_json(r#"{"attributes":[["he","she"]],"targets":[]}"#)
            .unwrap_err()
            .to_string();
        assert!(empty.contains("empty target"), "{empty}");
        let overlap = WordLists::from_json(r#"{"attributes":[["he","she"]],"targets":["she"]}"#)
            .unwrap_err()
            .to_string();
        assert!(overlap.contains("\"she\""), "{overlap}");
    }

    #[test]
    fn group_validation() {
        let l = lists();
        assert!(group("g", &["he is a boss.", "she is a boss."]).check(&l).is_ok());
        assert_eq!(
            group("g", &["he is a boss."]).check(&l).unwrap_err(),
            "missing attribute index 1"
        );
        let reason = group("g", &["she is a boss.", "she is a boss."])
            .check(&l)
            .unwrap_err();
        assert!(reason.contains("attribute word \"he\""), "{reason}");
        let reason = group("g", &["he is here.", "she is a boss."])
            .check(&l)
            .unwrap_err();
        assert!(reason.contains("target word"), "{reason}");
    }

    #[test]
    fn ingest_collects_rejections() {
        let l = lists();
        let good = serde_json::to_string(&group("a", &["he is a boss.", "she is a boss."])).unwrap();
        let missing = serde_json::to_string(&group("b", &["he is a boss."])).unwrap();
        let jsonl = format!("{good}\n{missing}\nnot json\n{good}\n");
        let ing = ingest_str(&jsonl, &l);
        assert_eq!(ing.corpus.len(), 1);
        let lines: Vec<usize> = ing.rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
        assert_eq!(ing.rejected[0].reason, "missing attribute index 1");
        assert!(ing.rejected[2].reason.contains("duplicate group_id"));
    }

    #[test]
    fn toxicity_examples() {
        let l = lists();
        let scores = [0.1, 0.9, 0.2, 0.8, 0.05];
        let groups = scores
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut g = group(&format!("g{i}"), &["he is a boss.", "she is a boss."]);
                g.toxicity = Some(vec![t, t / 2.0]);
                g
            })
            .collect();
        let corpus = Corpus::new(groups, l).unwrap();
        let kept = toxicity_filter(&corpus, 0.6).unwrap();
        let kept_tox: Vec<f64> = kept.groups.iter().map(|g| g.group_toxicity().unwrap()).collect();
        assert_eq!(kept_tox, vec![0.05, 0.1, 0.2]);

        let all = toxicity_filter(&corpus, 1.0).unwrap();
        assert_eq!(all.len(), corpus.len());
        assert!(toxicity_filter(&corpus, 0.0).is_err());
        assert!(toxicity_filter(&corpus, 1.5).is_err());
    }

    #[test]
    fn toxicity_requires_scores() {
        let corpus = Corpus::new(
            vec![group("a", &["he is a boss.", "she is a boss."])],
            lists(),
        )
        .unwrap();
        assert!(matches!(
            toxicity_filter(&corpus, 0.5),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn swap_examples() {
        let his_her = PronounMap::from_pairs(&[("his", "her")]);
        assert_eq!(
            counterfactual_swap("The airman flew his plane.", "airman", "airwoman", &his_her)
                .unwrap(),
            "The airwoman flew her plane."
        );
        assert_eq!(
            counterfactual_swap("Airman saluted.", "airman", "airwoman", &PronounMap::empty())
                .unwrap(),
            "Airwoman saluted."
        );
        assert!(
            counterfactual_swap("The pilot landed.", "airman", "airwoman", &PronounMap::empty())
                .is_err()
        );
    }

    #[test]
    fn keep_count_is_ceiling() {
        assert_eq!(keep_count(0.6, 1000).unwrap(), 600);
        assert_eq!(keep_count(0.6, 5).unwrap(), 3);
        assert_eq!(keep_count(0.5, 5).unwrap(), 3);
        assert_eq!(keep_count(2.0 / 3.0, 3).unwrap(), 2);
        assert_eq!(keep_count(1.0, 7).unwrap(), 7);
    }
}
