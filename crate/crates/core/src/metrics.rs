//! Unsmoothed BLEU-4 and comment-corpus entropy.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::codec::TokenSequence;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no pairs to score")]
    NoPairs,
    #[error("no non-empty comments")]
    NoTokens,
    #[error("n-gram order must be between 1 and {MAX_ORDER}, got {0}")]
    Order(usize),
}

/// Exact fraction `matched / total`; `0 / 0` counts as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Ratio {
    pub matched: u64,
    pub total: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }

    pub fn is_zero(self) -> bool {
        self.matched == 0
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Prediction n-grams found in the reference, each clipped to its count
/// there, over the number of prediction n-grams.
pub fn modified_precision(
    prediction: &TokenSequence,
    reference: &TokenSequence,
    n: usize,
) -> Result<Ratio, MetricsError> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(MetricsError::Order(n));
    }
    let pred = ngram_counts(prediction.tokens(), n);
    let refs = ngram_counts(reference.tokens(), n);
    let matched = pred
        .iter()
        .map(|(gram, &count)| count.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = pred.values().sum();
    Ok(Ratio { matched, total })
}

/// 1 when the prediction is longer than the reference, `e^(1 - r/c)`
/// otherwise, and 0 for an empty prediction.
pub fn brevity_penalty(prediction_len: usize, reference_len: usize) -> f64 {
    if prediction_len == 0 {
        0.0
    } else if prediction_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / prediction_len as f64).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuReport {
    pub precisions: [Ratio; MAX_ORDER],
    pub weights: [f64; MAX_ORDER],
    pub prediction_len: usize,
    pub reference_len: usize,
    pub brevity_penalty: f64,
    /// In `[0, 1]`.
    pub score: f64,
}

fn combine(precisions: [Ratio; MAX_ORDER], bp: f64) -> f64 {
    let weight = 1.0 / MAX_ORDER as f64;
    if precisions.iter().any(|p| p.is_zero()) {
        return 0.0;
    }
    bp * precisions
        .iter()
        .map(|p| weight * p.value().ln())
        .sum::<f64>()
        .exp()
}

/// Sentence BLEU-4 with uniform weights and no smoothing: any zero
/// precision, including an order with no prediction n-grams, scores 0.
pub fn bleu4(prediction: &TokenSequence, reference: &TokenSequence) -> BleuReport {
    let mut precisions = [Ratio { matched: 0, total: 0 }; MAX_ORDER];
    for (n, p) in precisions.iter_mut().enumerate() {
        *p = modified_precision(prediction, reference, n + 1).expect("order in range");
    }
    let (c, r) = (prediction.len(), reference.len());
    let bp = brevity_penalty(c, r);
    BleuReport {
        precisions,
        weights: [1.0 / MAX_ORDER as f64; MAX_ORDER],
        prediction_len: c,
        reference_len: r,
        brevity_penalty: bp,
        score: combine(precisions, bp),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuAggregation {
    /// Mean of per-pair sentence scores.
    #[default]
    SentenceMean,
    /// Pooled n-gram counts and lengths over all pairs.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusBleu {
    /// Scaled to `[0, 100]`.
    pub score: f64,
    pub n_pairs: usize,
    pub mean_precisions: [f64; MAX_ORDER],
    pub mean_brevity_penalty: f64,
}

pub fn corpus_bleu(
    pairs: &[(TokenSequence, TokenSequence)],
    aggregation: BleuAggregation,
) -> Result<CorpusBleu, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let reports: Vec<BleuReport> = pairs.iter().map(|(p, r)| bleu4(p, r)).collect();
    let n = reports.len() as f64;
    let mut mean_precisions = [0.0; MAX_ORDER];
    for report in &reports {
        for (m, p) in mean_precisions.iter_mut().zip(report.precisions) {
            *m += p.value() / n;
        }
    }
    let mean_brevity_penalty = reports.iter().map(|r| r.brevity_penalty).sum::<f64>() / n;
    let score = match aggregation {
        BleuAggregation::SentenceMean => reports.iter().map(|r| r.score).sum::<f64>() / n,
        BleuAggregation::Corpus => {
            let mut pooled = [Ratio { matched: 0, total: 0 }; MAX_ORDER];
            for report in &reports {
                for (acc, p) in pooled.iter_mut().zip(report.precisions) {
                    acc.matched += p.matched;
                    acc.total += p.total;
                }
            }
            let c = reports.iter().map(|r| r.prediction_len).sum();
            let rl = reports.iter().map(|r| r.reference_len).sum();
            combine(pooled, brevity_penalty(c, rl))
        }
    };
    Ok(CorpusBleu {
        score: 100.0 * score,
        n_pairs: reports.len(),
        mean_precisions,
        mean_brevity_penalty,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    /// Average comment length times token entropy, in bits.
    pub entropy_bits: f64,
    /// Mean tokens per comment.
    pub average_length: f64,
    /// Entropy of the pooled token distribution, in bits.
    pub token_entropy: f64,
    pub unique_tokens: usize,
    /// Share of all token occurrences per token.
    pub probabilities: BTreeMap<String, f64>,
}

pub fn comment_entropy(comments: &[TokenSequence]) -> Result<EntropyReport, MetricsError> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for comment in comments {
        for token in comment.tokens() {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(MetricsError::NoTokens);
    }
    let probabilities: BTreeMap<String, f64> = counts
        .iter()
        .map(|(&t, &c)| (t.to_owned(), c as f64 / total as f64))
        .collect();
    let token_entropy = -probabilities
        .values()
        .map(|&p| p * p.log2())
        .sum::<f64>();
    // A single token type gives -0.0; report it as 0.
    let token_entropy = token_entropy.max(0.0);
    let average_length = total as f64 / comments.len() as f64;
    Ok(EntropyReport {
        entropy_bits: average_length * token_entropy,
        average_length,
        token_entropy,
        unique_tokens: counts.len(),
        probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> TokenSequence {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_counted_precisions() {
        let pred = seq("sets the length of the file .");
        let reference = seq("change the length of the file .");
        let expected = [(6, 7), (5, 6), (4, 5), (3, 4)];
        for (n, (m, t)) in (1..=4).zip(expected) {
            assert_eq!(
                modified_precision(&pred, &reference, n).unwrap(),
                Ratio { matched: m, total: t }
            );
        }
        let report = bleu4(&pred, &reference);
        assert_eq!(report.brevity_penalty, 1.0);
        assert!((report.score - (3.0f64 / 7.0).powf(0.25)).abs() < 1e-12);
        assert!((report.score - 0.8091).abs() < 1e-4);
    }

    #[test]
    fn precision_edge_cases() {
        let a = seq("a b c d e");
        assert_eq!(modified_precision(&a, &a, 3).unwrap().value(), 1.0);
        assert_eq!(modified_precision(&a, &seq("x y z"), 1).unwrap().value(), 0.0);
        assert_eq!(modified_precision(&seq(""), &a, 1).unwrap(), Ratio { matched: 0, total: 0 });
        assert_eq!(modified_precision(&a, &a, 5), Err(MetricsError::Order(5)));
        // clipping: "the" appears twice in the prediction but once in the reference
        assert_eq!(
            modified_precision(&seq("the the cat"), &seq("the cat"), 1).unwrap(),
            Ratio { matched: 2, total: 3 }
        );
    }

    #[test]
    fn brevity_examples() {
        assert_eq!(brevity_penalty(8, 7), 1.0);
        assert_eq!(brevity_penalty(7, 7), 1.0);
        assert!((brevity_penalty(5, 10) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(brevity_penalty(0, 3), 0.0);
    }

    #[test]
    fn zero_rule_without_smoothing() {
        assert_eq!(bleu4(&seq("a b c d e"), &seq("a b c x d e")).score, 0.0);
        assert_eq!(bleu4(&seq("a b c"), &seq("a b c")).score, 0.0);
        assert_eq!(bleu4(&seq("a b c d"), &seq("a b c d")).score, 1.0);
    }

    #[test]
    fn corpus_aggregation() {
        let same = (seq("a b c d e"), seq("a b c d e"));
        let miss = (seq("q r s t"), seq("a b c d e"));
        let mean = corpus_bleu(&[same.clone(), same.clone()], BleuAggregation::SentenceMean).unwrap();
        assert_eq!(mean.score, 100.0);
        let half = corpus_bleu(&[same.clone(), miss], BleuAggregation::SentenceMean).unwrap();
        assert!((half.score - 50.0).abs() < 1e-12);
        assert_eq!(half.n_pairs, 2);
        let pooled = corpus_bleu(&[same], BleuAggregation::Corpus).unwrap();
        assert_eq!(pooled.score, 100.0);
        assert_eq!(corpus_bleu(&[], BleuAggregation::Corpus), Err(MetricsError::NoPairs));
    }

    #[test]
    fn entropy_examples() {
        let report = comment_entropy(&[seq("a b"), seq("a c")]).unwrap();
        assert!((report.token_entropy - 1.5).abs() < 1e-12);
        assert!((report.entropy_bits - 3.0).abs() < 1e-12);
        assert_eq!(report.unique_tokens, 3);
        assert_eq!(report.probabilities["a"], 0.5);

        let constant = comment_entropy(&[seq("x"), seq("x"), seq("x")]).unwrap();
        assert_eq!(constant.entropy_bits, 0.0);
        assert_eq!(comment_entropy(&[seq("")]), Err(MetricsError::NoTokens));
        assert_eq!(comment_entropy(&[]), Err(MetricsError::NoTokens));
    }
}
