//! Code/comment pair ingestion: first-sentence extraction, filtering,
//! deduplication, and train/validation/test splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::tokenize_comment;

pub const MIN_COMMENT_TOKENS: usize = 3;
pub const MAX_COMMENT_TOKENS: usize = 50;
pub const MIN_CODE_CHARS: usize = 8;
pub const MAX_CODE_CHARS: usize = 4096;

/// Lowercased comments containing any of these are dropped.
pub const BLACKLIST: [&str; 11] = [
    "created by",
    "thanks to",
    "precondition",
    "copyright",
    "do not remove",
    " bug ",
    " fix ",
    "?",
    "->",
    ">>>",
    "(self,",
];

/// Markers that end the first sentence without being part of it.
const BREAKS: [&str; 5] = ["\n\n", ":param", "@param", "@return", "@rtype"];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{needed} records needed for this split, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("unknown split scheme {0:?}; expected `ratio` or `fixed-test:N`")]
    Scheme(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub code: String,
    pub comment: String,
    #[serde(default)]
    pub language: String,
    #[serde(default)]
    pub origin: String,
}

impl DatasetRecord {
    pub fn new(code: impl Into<String>, comment: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            comment: comment.into(),
            ..Self::default()
        }
    }
}

/// Truncates at the earliest sentence end. A period is kept; the other
/// markers are not.
pub fn extract_first_sentence(comment: &str) -> &str {
    let period = comment.find('.').map(|i| i + 1);
    BREAKS
        .iter()
        .filter_map(|b| comment.find(b))
        .chain(period)
        .min()
        .map_or(comment, |end| &comment[..end])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Blacklist,
    CommentTooShort,
    CommentTooLong,
    CodeTooShort,
    CodeTooLong,
    Duplicate,
}

/// Checks one record whose comment is already cut to its first sentence.
/// Rules apply in the order blacklist, comment length, code length.
pub fn filter_record(record: &DatasetRecord) -> Result<(), RejectReason> {
    let lower = record.comment.to_lowercase();
    if BLACKLIST.iter().any(|b| lower.contains(b)) {
        return Err(RejectReason::Blacklist);
    }
    let tokens = tokenize_comment(&record.comment).len();
    if tokens < MIN_COMMENT_TOKENS {
        return Err(RejectReason::CommentTooShort);
    }
    if tokens > MAX_COMMENT_TOKENS {
        return Err(RejectReason::CommentTooLong);
    }
    let chars = record.code.chars().count();
    if chars < MIN_CODE_CHARS {
        return Err(RejectReason::CodeTooShort);
    }
    if chars > MAX_CODE_CHARS {
        return Err(RejectReason::CodeTooLong);
    }
    Ok(())
}

/// Keeps the first occurrence of every exact `(code, comment)` pair.
pub fn deduplicate(records: Vec<DatasetRecord>) -> (Vec<DatasetRecord>, usize) {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let before = records.len();
    let kept: Vec<DatasetRecord> = records
        .into_iter()
        .filter(|r| seen.insert((r.code.clone(), r.comment.clone())))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub passed: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
}

impl FilterReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

/// First-sentence extraction, filtering, then deduplication.
pub fn clean_corpus(records: Vec<DatasetRecord>) -> (Vec<DatasetRecord>, FilterReport) {
    let mut report = FilterReport {
        input: records.len(),
        ..FilterReport::default()
    };
    let mut accepted = Vec::with_capacity(records.len());
    for mut record in records {
        record.comment = extract_first_sentence(&record.comment).trim().to_owned();
        match filter_record(&record) {
            Ok(()) => accepted.push(record),
            Err(reason) => *report.rejected.entry(reason).or_insert(0) += 1,
        }
    }
    let (kept, duplicates) = deduplicate(accepted);
    if duplicates > 0 {
        report.rejected.insert(RejectReason::Duplicate, duplicates);
    }
    report.passed = kept.len();
    (kept, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SplitScheme {
    /// 80% train, 10% validation, 10% test.
    #[default]
    Ratio,
    /// A fixed number of test records, then 80/20 train/validation.
    FixedTest(usize),
}

impl FromStr for SplitScheme {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ratio" {
            return Ok(Self::Ratio);
        }
        s.strip_prefix("fixed-test:")
            .and_then(|n| n.parse().ok())
            .map(Self::FixedTest)
            .ok_or_else(|| CorpusError::Scheme(s.to_owned()))
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ratio => f.write_str("ratio"),
            Self::FixedTest(n) => write!(f, "fixed-test:{n}"),
        }
    }
}

impl TryFrom<String> for SplitScheme {
    type Error = CorpusError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SplitScheme> for String {
    fn from(s: SplitScheme) -> Self {
        s.to_string()
    }
}

macro_rules! split_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Default, PartialEq, Eq)]
        pub struct $name(Vec<DatasetRecord>);

        impl $name {
            pub fn from_records(records: Vec<DatasetRecord>) -> Self {
                Self(records)
            }

            pub fn records(&self) -> &[DatasetRecord] {
                &self.0
            }

            pub fn into_records(self) -> Vec<DatasetRecord> {
                self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
        }
    };
}

split_type!(
    /// Records the model is fitted on.
    TrainSplit
);
split_type!(
    /// Records used for model selection.
    ValidationSplit
);
split_type!(
    /// Held-out records; training entry points do not accept this type.
    TestSplit
);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: TrainSplit,
    pub validation: ValidationSplit,
    pub test: TestSplit,
}

/// Sizes `(train, validation, test)` for `n` records.
pub fn split_sizes(n: usize, scheme: SplitScheme) -> Result<(usize, usize, usize), CorpusError> {
    let (val, test) = match scheme {
        SplitScheme::Ratio => (n / 10, n / 10),
        SplitScheme::FixedTest(test) => (n.saturating_sub(test) / 5, test),
    };
    let train = n.saturating_sub(val + test);
    if train == 0 || val == 0 || test == 0 || val + test > n {
        let needed = match scheme {
            SplitScheme::Ratio => 10,
            SplitScheme::FixedTest(t) => t.max(1) + 5,
        };
        return Err(CorpusError::TooFewRecords { needed, got: n });
    }
    Ok((train, val, test))
}

/// Seeded shuffle, then test, validation, and train are cut from the front
/// in that order.
pub fn split_dataset(
    mut records: Vec<DatasetRecord>,
    scheme: SplitScheme,
    seed: u64,
) -> Result<Splits, CorpusError> {
    let (train, val, _) = split_sizes(records.len(), scheme)?;
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_part = records.split_off(records.len() - train);
    let val_part = records.split_off(records.len() - val);
    Ok(Splits {
        train: TrainSplit(train_part),
        validation: ValidationSplit(val_part),
        test: TestSplit(records),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageReport {
    pub test_pairs: usize,
    /// Test pairs whose exact `(code, comment)` also occurs in train.
    pub leaked: usize,
    pub leaked_fraction: f64,
}

pub fn leakage(train: &[DatasetRecord], test: &[DatasetRecord]) -> LeakageReport {
    let seen: HashSet<(&str, &str)> = train
        .iter()
        .map(|r| (r.code.as_str(), r.comment.as_str()))
        .collect();
    let leaked = test
        .iter()
        .filter(|r| seen.contains(&(r.code.as_str(), r.comment.as_str())))
        .count();
    LeakageReport {
        test_pairs: test.len(),
        leaked,
        leaked_fraction: if test.is_empty() {
            0.0
        } else {
            leaked as f64 / test.len() as f64
        },
    }
}

/// Counts of comment token lengths and code character lengths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LengthHistograms {
    pub comment_tokens: BTreeMap<usize, usize>,
    /// Keyed by the lower edge of a 64-character bucket.
    pub code_chars: BTreeMap<usize, usize>,
}

pub const CODE_BUCKET: usize = 64;

pub fn length_histograms(records: &[DatasetRecord]) -> LengthHistograms {
    let mut h = LengthHistograms::default();
    for r in records {
        *h.comment_tokens
            .entry(tokenize_comment(&r.comment).len())
            .or_insert(0) += 1;
        let bucket = r.code.chars().count() / CODE_BUCKET * CODE_BUCKET;
        *h.code_chars.entry(bucket).or_insert(0) += 1;
    }
    h
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<DatasetRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl(mut writer: impl Write, records: &[DatasetRecord]) -> Result<(), CorpusError> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, CorpusError> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<(), CorpusError> {
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?), records)
}
