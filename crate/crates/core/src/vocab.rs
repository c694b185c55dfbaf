//! Open output vocabulary: words and subwords mined from training comments,
//! on top of a base set of letters, digits, and punctuation that can spell
//! anything.
//!
//! Element counts are first collected per token, then every element that can
//! be split is replaced by its parts, with its count added to each part.
//! Splitting rules, tried in order:
//!
//! 1. a non-English element that parses into two or more English words
//!    (`filereader` -> `file reader`);
//! 2. an `ing` / `ly` suffix on a known root (`returning` -> `return ing`);
//! 3. an `s` / `d` suffix on a known root (`returns` -> `return s`);
//! 4. a non-English element that parses into other known elements
//!    (`guiframe` -> `gui frame`).
//!
//! Parts are split again until no rule fires.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{tokenize_comment, PUNCTUATION};

const DEFAULT_WORDS: &str = include_str!("../data/english_words.txt");

/// Parts produced by decomposition must be at least this many characters.
const MIN_PART_CHARS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("threshold must be at least 1")]
    InvalidThreshold,
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error("dictionary entry {0:?} is not lowercase alphabetic")]
    BadDictionaryEntry(String),
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Occurrence counts of lowercase elements.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordCounts(BTreeMap<String, u64>);

impl WordCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, element: &str, count: u64) {
        if element.is_empty() || count == 0 {
            return;
        }
        *self.0.entry(element.to_lowercase()).or_insert(0) += count;
    }

    pub fn get(&self, element: &str) -> u64 {
        self.0.get(element).copied().unwrap_or(0)
    }

    pub fn contains(&self, element: &str) -> bool {
        self.0.contains_key(element)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Sum of `count × character length` over all elements. Splitting moves
    /// counts onto parts that concatenate back to the element, so this is
    /// invariant under propagation.
    pub fn character_mass(&self) -> u128 {
        self.0
            .iter()
            .map(|(k, &v)| v as u128 * k.chars().count() as u128)
            .sum()
    }
}

impl<S: AsRef<str>> FromIterator<(S, u64)> for WordCounts {
    fn from_iter<I: IntoIterator<Item = (S, u64)>>(iter: I) -> Self {
        let mut counts = WordCounts::new();
        for (k, v) in iter {
            counts.add(k.as_ref(), v);
        }
        counts
    }
}

/// Counts every token of every comment.
pub fn build_word_counts<S: AsRef<str>>(comments: &[S]) -> WordCounts {
    let mut counts = WordCounts::new();
    for comment in comments {
        for token in tokenize_comment(comment.as_ref()).tokens() {
            counts.add(token, 1);
        }
    }
    counts
}

/// Set of lowercase English words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnglishDictionary {
    words: HashSet<String>,
}

impl EnglishDictionary {
    pub fn from_words<I, S>(words: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = HashSet::new();
        for w in words {
            let w = w.as_ref().trim();
            if w.is_empty() {
                continue;
            }
            if !w.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(VocabError::BadDictionaryEntry(w.to_owned()));
            }
            set.insert(w.to_owned());
        }
        if set.is_empty() {
            return Err(VocabError::EmptyDictionary);
        }
        Ok(Self { words: set })
    }

    /// One word per line.
    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_words(text.lines())
    }

    /// The bundled list of ~10k frequent English words.
    pub fn embedded() -> Self {
        Self::from_words(DEFAULT_WORDS.lines()).expect("bundled word list is valid")
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Membership tests used by the splitting rules.
struct Known<'a> {
    dict: &'a EnglishDictionary,
    counts: &'a WordCounts,
}

impl Known<'_> {
    fn english(&self, s: &str) -> bool {
        self.dict.contains(s)
    }

    /// Roots and parts may come from the counts, the dictionary, or be one of
    /// the suffixes the rules themselves produce.
    fn element(&self, s: &str) -> bool {
        self.counts.contains(s) || self.dict.contains(s) || SUFFIXES.contains(&s)
    }
}

const SUFFIXES: [&str; 4] = ["ing", "ly", "s", "d"];

/// Parses `s` into the fewest parts (at least two) accepted by `accept`.
/// Among parses with equally few parts, longer leading parts win.
fn min_parts_parse(s: &str, accept: impl Fn(&str) -> bool) -> Option<Vec<String>> {
    let bounds: Vec<usize> = s
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(s.len()))
        .collect();
    let n = bounds.len() - 1;
    if n < 2 * MIN_PART_CHARS {
        return None;
    }
    // best[i] = (parts needed to cover chars i.., end of the first part)
    let mut best: Vec<Option<(usize, usize)>> = vec![None; n + 1];
    best[n] = Some((0, n));
    for i in (0..n).rev() {
        for j in (i + MIN_PART_CHARS..=n).rev() {
            let Some((rest, _)) = best[j] else { continue };
            if i == 0 && j == n {
                continue; // the element itself is not a split
            }
            if !accept(&s[bounds[i]..bounds[j]]) {
                continue;
            }
            if best[i].is_none_or(|(parts, _)| rest + 1 < parts) {
                best[i] = Some((rest + 1, j));
            }
        }
    }
    let mut parts = Vec::new();
    let mut at = 0;
    while at < n {
        let (_, next) = best[at]?;
        parts.push(s[bounds[at]..bounds[next]].to_owned());
        at = next;
    }
    (parts.len() >= 2).then_some(parts)
}

fn suffix_split(element: &str, suffixes: &[&str], known: &Known<'_>) -> Option<Vec<String>> {
    suffixes.iter().find_map(|suffix| {
        let stem = element.strip_suffix(suffix)?;
        (stem.chars().count() >= MIN_PART_CHARS && known.element(stem))
            .then(|| vec![stem.to_owned(), (*suffix).to_owned()])
    })
}

/// The first rule that fires on `element`, if any.
fn split_once(element: &str, known: &Known<'_>) -> Option<Vec<String>> {
    let english = known.english(element);
    if !english {
        if let Some(parts) = min_parts_parse(element, |p| known.english(p)) {
            return Some(parts);
        }
    }
    if let Some(parts) = suffix_split(element, &["ing", "ly"], known) {
        return Some(parts);
    }
    if let Some(parts) = suffix_split(element, &["s", "d"], known) {
        return Some(parts);
    }
    if !english {
        return min_parts_parse(element, |p| known.element(p));
    }
    None
}

/// Splits `element` with the rules above, recursively, until no rule fires.
/// Returns `[element]` when nothing applies.
pub fn split_element(element: &str, dict: &EnglishDictionary, counts: &WordCounts) -> Vec<String> {
    let known = Known { dict, counts };
    let mut out = Vec::new();
    split_into(element, &known, &mut out);
    out
}

fn split_into(element: &str, known: &Known<'_>, out: &mut Vec<String>) {
    match split_once(element, known) {
        // Every part is strictly shorter than the element, so this terminates.
        Some(parts) => {
            for part in parts {
                split_into(&part, known, out);
            }
        }
        None => out.push(element.to_owned()),
    }
}

/// Replaces every splittable element by its parts, adding its count to each
/// part occurrence.
pub fn propagate_counts(counts: &WordCounts, dict: &EnglishDictionary) -> WordCounts {
    let known = Known { dict, counts };
    let mut out = WordCounts::new();
    let mut parts = Vec::new();
    for (element, count) in counts.iter() {
        parts.clear();
        split_into(element, &known, &mut parts);
        for part in &parts {
            out.add(part, count);
        }
    }
    out
}

/// Control tokens, stored at ids `0..5` in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Start,
    End,
    BeginSpell,
    EndSpell,
    Pad,
}

impl Special {
    pub const ALL: [Special; 5] = [
        Special::Start,
        Special::End,
        Special::BeginSpell,
        Special::EndSpell,
        Special::Pad,
    ];

    pub fn surface(self) -> &'static str {
        match self {
            Special::Start => "<start>",
            Special::End => "<end>",
            Special::BeginSpell => "<begin_spell>",
            Special::EndSpell => "<end_spell>",
            Special::Pad => "<pad>",
        }
    }

    fn id(self) -> usize {
        self as usize
    }
}

/// Letters, digits, and punctuation, in that order.
pub fn base_set() -> Vec<String> {
    ('a'..='z')
        .chain('0'..='9')
        .chain(PUNCTUATION.chars())
        .map(|c| c.to_string())
        .collect()
}

/// Ordered output vocabulary with a bijective element/id map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    elements: Vec<String>,
    ids: HashMap<String, usize>,
    threshold: u64,
    fingerprint: String,
    max_element_chars: usize,
}

/// Splits `counts` and keeps the base set plus every element whose
/// propagated count reaches `threshold`.
pub fn build_vocabulary(
    counts: &WordCounts,
    dict: &EnglishDictionary,
    threshold: u64,
) -> Result<Vocabulary, VocabError> {
    Vocabulary::from_propagated_counts(&propagate_counts(counts, dict), threshold)
}

impl Vocabulary {
    /// Builds from counts that are already split. Ordering: special tokens,
    /// the base set, then remaining elements by descending count with
    /// lexicographic tie-break.
    pub fn from_propagated_counts(counts: &WordCounts, threshold: u64) -> Result<Self, VocabError> {
        if threshold == 0 {
            return Err(VocabError::InvalidThreshold);
        }
        let mut elements: Vec<String> =
            Special::ALL.iter().map(|s| s.surface().to_owned()).collect();
        let base = base_set();
        let base_lookup: HashSet<&str> = base.iter().map(String::as_str).collect();
        let mut frequent: Vec<(&str, u64)> = counts
            .iter()
            .filter(|&(e, c)| c >= threshold && !base_lookup.contains(e))
            .collect();
        frequent.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        elements.extend(base.iter().cloned());
        elements.extend(frequent.into_iter().map(|(e, _)| e.to_owned()));
        Self::from_elements(elements, threshold)
    }

    fn from_elements(elements: Vec<String>, threshold: u64) -> Result<Self, VocabError> {
        for special in Special::ALL {
            if elements.get(special.id()).map(String::as_str) != Some(special.surface()) {
                return Err(VocabError::Format(format!(
                    "expected {} at id {}",
                    special.surface(),
                    special.id()
                )));
            }
        }
        let mut ids = HashMap::with_capacity(elements.len());
        for (i, e) in elements.iter().enumerate() {
            if e.is_empty() || e.chars().any(char::is_whitespace) {
                return Err(VocabError::Format(format!("invalid element {e:?}")));
            }
            if ids.insert(e.clone(), i).is_some() {
                return Err(VocabError::Format(format!("duplicate element {e:?}")));
            }
        }
        if let Some(missing) = base_set().into_iter().find(|b| !ids.contains_key(b)) {
            return Err(VocabError::Format(format!("base element {missing:?} missing")));
        }
        let max_element_chars = elements
            .iter()
            .skip(Special::ALL.len())
            .map(|e| e.chars().count())
            .max()
            .unwrap_or(1);
        let fingerprint = fingerprint(&elements);
        Ok(Self {
            elements,
            ids,
            threshold,
            fingerprint,
            max_element_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    /// SHA-256 over the elements in id order, hex encoded.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn special(&self, special: Special) -> usize {
        special.id()
    }

    pub fn special_kind(&self, id: usize) -> Option<Special> {
        Special::ALL.get(id).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < Special::ALL.len()
    }

    /// Id of a non-special element.
    pub fn element_id(&self, element: &str) -> Option<usize> {
        self.ids.get(element).copied().filter(|&id| !self.is_special(id))
    }

    pub fn element(&self, id: usize) -> &str {
        &self.elements[id]
    }

    pub fn elements(&self) -> &[String] {
        &self.elements
    }

    pub fn max_element_chars(&self) -> usize {
        self.max_element_chars
    }

    /// Header line `#threshold=<n> #fingerprint=<hex>`, then one element per
    /// line in id order.
    pub fn to_text(&self) -> String {
        let mut out = format!("#threshold={} #fingerprint={}\n", self.threshold, self.fingerprint);
        for e in &self.elements {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| VocabError::Format("empty file".into()))?;
        let (threshold, stated) = parse_header(header)?;
        let elements: Vec<String> = lines.map(str::to_owned).collect();
        let vocab = Self::from_elements(elements, threshold)?;
        if vocab.fingerprint != stated {
            return Err(VocabError::Format(format!(
                "fingerprint {stated} does not match contents ({})",
                vocab.fingerprint
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_header(header: &str) -> Result<(u64, String), VocabError> {
    let bad = || VocabError::Format(format!("bad header {header:?}"));
    let mut fields = header.split_whitespace();
    let threshold = fields
        .next()
        .and_then(|f| f.strip_prefix("#threshold="))
        .and_then(|v| v.parse::<u64>().ok())
        .ok_or_else(bad)?;
    let fingerprint = fields
        .next()
        .and_then(|f| f.strip_prefix("#fingerprint="))
        .ok_or_else(bad)?;
    if fields.next().is_some() || threshold == 0 {
        return Err(bad());
    }
    Ok((threshold, fingerprint.to_owned()))
}

fn fingerprint(elements: &[String]) -> String {
    let mut hasher = Sha256::new();
    for e in elements {
        hasher.update(e.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict(words: &[&str]) -> EnglishDictionary {
        EnglishDictionary::from_words(words.iter().copied()).unwrap()
    }

    fn counts(pairs: &[(&str, u64)]) -> WordCounts {
        pairs.iter().map(|&(k, v)| (k, v)).collect()
    }

    #[test]
    fn word_count_examples() {
        assert_eq!(build_word_counts(&["a b", "a"]), counts(&[("a", 2), ("b", 1)]));
        assert_eq!(
            build_word_counts(&["Returns x."]),
            counts(&[("returns", 1), ("x", 1), (".", 1)])
        );
        assert!(build_word_counts::<&str>(&[]).is_empty());
    }

    #[test]
    fn split_examples() {
        let d = EnglishDictionary::embedded();
        let none = WordCounts::new();
        assert_eq!(split_element("filereader", &d, &none), vec!["file", "reader"]);
        assert_eq!(split_element("returning", &d, &none), vec!["return", "ing"]);
        let with_return = counts(&[("return", 3), ("returns", 2)]);
        assert_eq!(split_element("returns", &d, &with_return), vec!["return", "s"]);
        let with_gui = counts(&[("gui", 6), ("guiframe", 5)]);
        assert_eq!(split_element("guiframe", &d, &with_gui), vec!["gui", "frame"]);
    }

    #[test]
    fn unsplittable_element_is_returned_whole() {
        let d = dict(&["file"]);
        assert_eq!(split_element("zzyzx", &d, &WordCounts::new()), vec!["zzyzx"]);
        assert_eq!(split_element("file", &d, &WordCounts::new()), vec!["file"]);
    }

    #[test]
    fn suffix_needs_two_char_stem() {
        let d = dict(&["y"]);
        let c = counts(&[("ly", 1), ("y", 1)]);
        assert_eq!(split_element("ly", &d, &c), vec!["ly"]);
        assert_eq!(split_element("yly", &d, &c), vec!["yly"]);
    }

    #[test]
    fn propagation_moves_counts_onto_parts() {
        let d = dict(&["frame"]);
        let c = counts(&[("guiframe", 5), ("gui", 6), ("frame", 2)]);
        let p = propagate_counts(&c, &d);
        assert_eq!(p, counts(&[("gui", 11), ("frame", 7)]));
        assert_eq!(p.character_mass(), c.character_mass());

        let vocab = build_vocabulary(&c, &d, 10).unwrap();
        assert!(vocab.element_id("gui").is_some());
        assert!(vocab.element_id("frame").is_none());
    }

    #[test]
    fn empty_counts_give_base_set() {
        let v = build_vocabulary(&WordCounts::new(), &dict(&["a"]), 10).unwrap();
        assert_eq!(v.len(), Special::ALL.len() + 26 + 10 + 32);
        for b in base_set() {
            assert!(v.element_id(&b).is_some(), "{b}");
        }
    }

    #[test]
    fn ordering_is_count_then_lexicographic() {
        let c = counts(&[("beta", 5), ("alpha", 5), ("gamma", 9), ("rare", 1)]);
        let v = Vocabulary::from_propagated_counts(&c, 2).unwrap();
        let tail: Vec<&str> = v.elements()[Special::ALL.len() + 68..]
            .iter()
            .map(String::as_str)
            .collect();
        assert_eq!(tail, ["gamma", "alpha", "beta"]);
    }

    #[test]
    fn zero_threshold_rejected() {
        assert!(matches!(
            Vocabulary::from_propagated_counts(&WordCounts::new(), 0),
            Err(VocabError::InvalidThreshold)
        ));
    }

    #[test]
    fn text_round_trip_and_tamper_detection() {
        let c = counts(&[("file", 20), ("reader", 12)]);
        let v = Vocabulary::from_propagated_counts(&c, 10).unwrap();
        let text = v.to_text();
        assert!(text.starts_with(&format!("#threshold=10 #fingerprint={}\n", v.fingerprint())));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        let tampered = text.replace("reader", "writer");
        assert!(matches!(
            Vocabulary::from_text(&tampered),
            Err(VocabError::Format(_))
        ));
    }

    #[test]
    fn dictionary_rejects_bad_entries() {
        assert!(matches!(
            EnglishDictionary::from_words(["Hello"]),
            Err(VocabError::BadDictionaryEntry(_))
        ));
        assert!(matches!(
            EnglishDictionary::from_words(Vec::<String>::new()),
            Err(VocabError::EmptyDictionary)
        ));
    }
}
