//! Clipped n-gram precision by plain scanning, kept as exact fractions.

pub fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| &tokens[i..i + n]).collect()
}

fn occurrences(grams: &[&[String]], gram: &[String]) -> u64 {
    grams.iter().filter(|g| **g == gram).count() as u64
}

/// `(clipped matches, prediction n-grams)`.
pub fn precision(prediction: &[String], reference: &[String], n: usize) -> (u64, u64) {
    let pred = ngrams(prediction, n);
    let refs = ngrams(reference, n);
    let mut seen: Vec<&[String]> = Vec::new();
    let mut matched = 0;
    for gram in &pred {
        if seen.contains(gram) {
            continue;
        }
        seen.push(gram);
        matched += occurrences(&pred, gram).min(occurrences(&refs, gram));
    }
    (matched, pred.len() as u64)
}

/// Unsmoothed BLEU-4 from the exact product of the four fractions.
pub fn bleu4(prediction: &[String], reference: &[String]) -> f64 {
    let (mut num, mut den) = (1u128, 1u128);
    for n in 1..=4 {
        let (m, t) = precision(prediction, reference, n);
        if m == 0 {
            return 0.0;
        }
        num *= m as u128;
        den *= t as u128;
    }
    let (c, r) = (prediction.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (num as f64 / den as f64).powf(0.25)
}
