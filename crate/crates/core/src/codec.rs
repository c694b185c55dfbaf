//! Comment tokenization, out-of-vocabulary word splitting, and the spell-token
//! framing used for decoder targets.

use crate::vocab::{Special, Vocabulary};

/// The 32 ASCII punctuation characters. Each occurrence is its own token.
pub const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("cannot spell {word:?}: character {ch:?} is not in the vocabulary")]
    Unencodable { word: String, ch: char },
    #[error("cannot split an empty word")]
    EmptyWord,
}

/// Lowercased surface tokens of a comment: words and punctuation marks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        debug_assert!(tokens
            .iter()
            .all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace)));
        Self(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

impl<S: AsRef<str>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self::new(iter.into_iter().map(|s| s.as_ref().to_owned()).collect())
    }
}

/// Lowercases, then treats every punctuation mark and every whitespace
/// separated run of other characters as a token.
pub fn tokenize_comment(raw: &str) -> TokenSequence {
    let lower = raw.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in lower.chars() {
        if c.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if is_punctuation(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    TokenSequence(tokens)
}

/// Covers `word` left to right, always taking the longest vocabulary element
/// that matches at the current position.
pub fn greedy_split_word(word: &str, vocab: &Vocabulary) -> Result<Vec<String>, CodecError> {
    if word.is_empty() {
        return Err(CodecError::EmptyWord);
    }
    // Byte offsets of every char boundary, including the end.
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    let max_chars = vocab.max_element_chars();
    let mut parts = Vec::new();
    let mut at = 0;
    while at + 1 < bounds.len() {
        let longest = (bounds.len() - 1).min(at + max_chars);
        let next = (at + 1..=longest)
            .rev()
            .find(|&end| vocab.element_id(&word[bounds[at]..bounds[end]]).is_some());
        match next {
            Some(end) => {
                parts.push(word[bounds[at]..bounds[end]].to_owned());
                at = end;
            }
            None => {
                let ch = word[bounds[at]..].chars().next().unwrap_or_default();
                return Err(CodecError::Unencodable {
                    word: word.to_owned(),
                    ch,
                });
            }
        }
    }
    Ok(parts)
}

/// Vocabulary ids for a decoder target: `START`, the tokens, `END`. Tokens
/// outside the vocabulary become `BEGIN_SPELL part.. END_SPELL`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetEncoding(Vec<usize>);

impl TargetEncoding {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Wraps ids produced elsewhere (a checkpointed dataset, a test fixture).
    pub fn from_ids(ids: Vec<usize>) -> Self {
        Self(ids)
    }
}

pub fn encode_target(tokens: &TokenSequence, vocab: &Vocabulary) -> Result<TargetEncoding, CodecError> {
    let mut ids = vec![vocab.special(Special::Start)];
    for token in tokens.tokens() {
        if let Some(id) = vocab.element_id(token) {
            ids.push(id);
            continue;
        }
        let parts = greedy_split_word(token, vocab)?;
        let part_ids = parts
            .iter()
            .map(|p| vocab.element_id(p).expect("greedy split yields vocabulary elements"));
        if parts.len() == 1 {
            ids.extend(part_ids);
        } else {
            ids.push(vocab.special(Special::BeginSpell));
            ids.extend(part_ids);
            ids.push(vocab.special(Special::EndSpell));
        }
    }
    ids.push(vocab.special(Special::End));
    Ok(TargetEncoding(ids))
}

/// Turns decoder output back into text. Total over arbitrary id sequences:
/// an unclosed spell span ends at the end of the sequence, a stray
/// `END_SPELL` or a nested `BEGIN_SPELL` is dropped, and unknown ids are
/// skipped.
pub fn decode_prediction(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut span: Option<String> = None;
    for &id in ids {
        if id >= vocab.len() {
            continue;
        }
        match vocab.special_kind(id) {
            Some(Special::Start | Special::End | Special::Pad) => {}
            Some(Special::BeginSpell) => {
                if span.is_none() {
                    span = Some(String::new());
                }
            }
            Some(Special::EndSpell) => {
                if let Some(word) = span.take() {
                    if !word.is_empty() {
                        words.push(word);
                    }
                }
            }
            None => {
                let element = vocab.element(id);
                match span.as_mut() {
                    Some(word) => word.push_str(element),
                    None => words.push(element.to_owned()),
                }
            }
        }
    }
    if let Some(word) = span {
        if !word.is_empty() {
            words.push(word);
        }
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{EnglishDictionary, Vocabulary, WordCounts};

    fn vocab_with(words: &[&str]) -> Vocabulary {
        let counts: WordCounts = words.iter().map(|w| (w.to_string(), 100)).collect();
        Vocabulary::from_propagated_counts(&counts, 1).unwrap()
    }

    #[test]
    fn punctuation_set_is_ascii() {
        assert_eq!(PUNCTUATION.chars().count(), 32);
        assert!(PUNCTUATION.chars().all(is_punctuation));
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize_comment("Returns the version.").tokens(),
            &["returns", "the", "version", "."]
        );
        assert_eq!(
            tokenize_comment("get contents of a file").tokens(),
            &["get", "contents", "of", "a", "file"]
        );
        assert!(tokenize_comment("").is_empty());
        assert_eq!(
            tokenize_comment("  Foo(bar,  baz)\n\tqux ").tokens(),
            &["foo", "(", "bar", ",", "baz", ")", "qux"]
        );
    }

    #[test]
    fn greedy_prefers_longest_prefix() {
        let vocab = vocab_with(&["file", "not", "found", "no"]);
        assert_eq!(
            greedy_split_word("filenotfound", &vocab).unwrap(),
            vec!["file", "not", "found"]
        );
        assert_eq!(greedy_split_word("file", &vocab).unwrap(), vec!["file"]);
        assert_eq!(greedy_split_word("zq", &vocab).unwrap(), vec!["z", "q"]);
    }

    #[test]
    fn greedy_rejects_unknown_characters() {
        let vocab = vocab_with(&[]);
        assert_eq!(
            greedy_split_word("caf\u{e9}", &vocab),
            Err(CodecError::Unencodable {
                word: "caf\u{e9}".into(),
                ch: '\u{e9}'
            })
        );
        assert_eq!(greedy_split_word("", &vocab), Err(CodecError::EmptyWord));
    }

    #[test]
    fn encode_with_spell_span() {
        let vocab = vocab_with(&["create", "to", "file", "reader"]);
        let id = |s: &str| vocab.element_id(s).unwrap();
        let tokens = TokenSequence::from_iter(["create", "to"]);
        assert_eq!(
            encode_target(&tokens, &vocab).unwrap().ids(),
            &[vocab.special(Special::Start), id("create"), id("to"), vocab.special(Special::End)]
        );
        let tokens = TokenSequence::from_iter(["create", "filereader", "to"]);
        assert_eq!(
            encode_target(&tokens, &vocab).unwrap().ids(),
            &[
                vocab.special(Special::Start),
                id("create"),
                vocab.special(Special::BeginSpell),
                id("file"),
                id("reader"),
                vocab.special(Special::EndSpell),
                id("to"),
                vocab.special(Special::End)
            ]
        );
        assert_eq!(
            encode_target(&TokenSequence::default(), &vocab).unwrap().ids(),
            &[vocab.special(Special::Start), vocab.special(Special::End)]
        );
    }

    #[test]
    fn decode_examples() {
        let vocab = vocab_with(&["create", "to", "file", "reader", "get", "the", "id", "gui"]);
        let id = |s: &str| vocab.element_id(s).unwrap();
        let begin = vocab.special(Special::BeginSpell);
        let end = vocab.special(Special::EndSpell);
        assert_eq!(
            decode_prediction(&[id("create"), begin, id("file"), id("reader"), end, id("to")], &vocab),
            "create filereader to"
        );
        assert_eq!(decode_prediction(&[id("get"), id("the"), id("id")], &vocab), "get the id");
        assert_eq!(decode_prediction(&[begin, id("gui")], &vocab), "gui");
    }

    #[test]
    fn decode_repairs_malformed_spans() {
        let vocab = vocab_with(&["a", "b"]);
        let id = |s: &str| vocab.element_id(s).unwrap();
        let begin = vocab.special(Special::BeginSpell);
        let end = vocab.special(Special::EndSpell);
        let start = vocab.special(Special::Start);
        // stray END_SPELL dropped, nested BEGIN_SPELL dropped
        assert_eq!(decode_prediction(&[id("a"), end, id("b")], &vocab), "a b");
        assert_eq!(
            decode_prediction(&[begin, id("a"), begin, id("b"), end, id("a")], &vocab),
            "ab a"
        );
        assert_eq!(decode_prediction(&[start, begin, end, id("a"), 9999], &vocab), "a");
    }

    #[test]
    fn default_dictionary_loads() {
        let dict = EnglishDictionary::embedded();
        assert!(dict.contains("file") && dict.contains("reader"));
    }
}
