//! Summary quality metrics: n-gram overlap F1, longest-common-subsequence
//! F1, novel n-gram proportions, and lead-sentence baselines.
//!
//! Scoring tokenizes words by lowercasing and splitting on runs of
//! non-alphanumeric characters, with no stemming. Multi-sentence inputs are
//! scored on the flattened token sequence.

use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// The reference contributed no grams at this order, so the score is a
    /// forced zero rather than a measurement.
    pub empty_reference: bool,
}

impl RougeScore {
    fn from_pr(precision: f64, recall: f64, empty_reference: bool) -> RougeScore {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore { precision, recall, f1, empty_reference }
    }
}

/// Lowercased word tokens: maximal alphanumeric runs.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
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

/// N-gram overlap with clipped counts: each reference gram may be matched at
/// most as often as it occurs in the reference.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    assert!(n >= 1, "gram order must be at least 1");
    let cand = words(candidate);
    let refr = words(reference);
    let cand_counts = ngram_counts(&cand, n);
    let ref_counts = ngram_counts(&refr, n);
    let cand_total: u64 = cand_counts.values().sum();
    let ref_total: u64 = ref_counts.values().sum();
    let overlap: u64 = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(*ref_counts.get(gram).unwrap_or(&0)))
        .sum();
    let p = if cand_total == 0 { 0.0 } else { overlap as f64 / cand_total as f64 };
    let r = if ref_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
    RougeScore::from_pr(p, r, ref_total == 0)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    // rolling-row DP
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest common subsequence of word tokens; precision against candidate
/// length, recall against reference length.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let cand = words(candidate);
    let refr = words(reference);
    let lcs = lcs_len(&cand, &refr) as f64;
    let p = if cand.is_empty() { 0.0 } else { lcs / cand.len() as f64 };
    let r = if refr.is_empty() { 0.0 } else { lcs / refr.len() as f64 };
    RougeScore::from_pr(p, r, refr.is_empty())
}

/// Fraction of summary n-grams that never appear in the source article.
/// `None` when the summary has fewer than `n` words.
pub fn novel_ngram_proportion(summary: &str, article: &str, n: usize) -> Option<f64> {
    assert!(n >= 1, "gram order must be at least 1");
    let sum_words = words(summary);
    if sum_words.len() < n {
        return None;
    }
    let art_words = words(article);
    let art_grams: std::collections::HashSet<&[String]> =
        art_words.windows(n).collect();
    let total = sum_words.len() - n + 1;
    let novel = sum_words.windows(n).filter(|g| !art_grams.contains(*g)).count();
    Some(novel as f64 / total as f64)
}

/// First `min(x, count)` sentences joined with single spaces.
pub fn lead_x(sentences: &[String], x: usize) -> String {
    assert!(x >= 1, "lead length must be at least 1");
    sentences[..x.min(sentences.len())].join(" ")
}
