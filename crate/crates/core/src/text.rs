//! Lowercasing word/punctuation tokenizer shared by word matching and the
//! encoder vocabulary.

/// A token together with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub word: bool,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Splits `text` into word runs and single punctuation characters.
/// Whitespace is dropped.
pub fn spans(text: &str) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            out.push(Span {
                start: s,
                end: i,
                word: true,
            });
        }
        if !c.is_whitespace() {
            out.push(Span {
                start: i,
                end: i + c.len_utf8(),
                word: false,
            });
        }
    }
    if let Some(s) = start {
        out.push(Span {
            start: s,
            end: text.len(),
            word: true,
        });
    }
    out
}

/// Lowercased tokens, punctuation included.
pub fn tokenize(text: &str) -> Vec<String> {
    spans(text)
        .into_iter()
        .map(|s| text[s.start..s.end].to_lowercase())
        .collect()
}

/// Token positions covered by every occurrence of `word` (which may itself
/// tokenize to several tokens).
pub fn word_positions(tokens: &[String], word: &str) -> Vec<usize> {
    let needle = tokenize(word);
    if needle.is_empty() || needle.len() > tokens.len() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for start in 0..=tokens.len() - needle.len() {
        if tokens[start..start + needle.len()] == needle[..] {
            out.extend(start..start + needle.len());
        }
    }
    out
}

/// Case-insensitive token-boundary containment.
pub fn contains_word(text: &str, word: &str) -> bool {
    !word_positions(&tokenize(text), word).is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(tokenize("He is a Boss."), vec!["he", "is", "a", "boss", "."]);
        assert_eq!(tokenize("  it's  fine!! "), vec!["it's", "fine", "!", "!"]);
    }

    #[test]
    fn boundary_matching() {
        assert!(contains_word("She is a boss.", "she"));
        assert!(!contains_word("She is a boss.", "he"));
        assert!(contains_word("The self-made man.", "self-made"));
        let toks = tokenize("he and he");
        assert_eq!(word_positions(&toks, "he"), vec![0, 2]);
    }
}
