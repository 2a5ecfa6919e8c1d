use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::text;

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

/// Word-level vocabulary with dense ids; `[PAD]`, `[MASK]`, `[UNK]` take
/// ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Tokenizer {
    pub const PAD_ID: usize = 0;
    pub const MASK_ID: usize = 1;
    pub const UNK_ID: usize = 2;

    /// Vocabulary of every token in `texts`, sorted so the ids do not depend
    /// on text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(text::tokenize).collect();
        let vocab: Vec<String> = [PAD, MASK, UNK]
            .into_iter()
            .map(String::from)
            .chain(words.into_iter().filter(|w| ![PAD, MASK, UNK].contains(&w.as_str())))
            .collect();
        Tokenizer::from(vocab)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text::tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_ids_with_specials_first() {
        let t = Tokenizer::build(["she is a boss .", "He is a boss"]);
        assert_eq!(t.token(0), PAD);
        assert_eq!(t.token(1), MASK);
        assert_eq!(t.token(2), UNK);
        assert_eq!(t.len(), 3 + 6);
        assert_eq!(t.encode("a zebra"), vec![t.id("a"), Tokenizer::UNK_ID]);
        let same = Tokenizer::build(["He is a boss", "she is a boss ."]);
        assert_eq!(t, same);
    }
}
