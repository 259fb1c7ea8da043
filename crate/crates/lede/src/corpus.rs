//! Pretraining data construction and finetuning data corruption.
//!
//! News articles front-load their content, so the first three sentences act
//! as a free summary of the rest. This module turns raw articles into
//! (lead, body) pairs under strict filters, and provides the corruption and
//! theme-pair sampling that the finetuning objectives consume.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::words;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FilterConfig {
    pub lead_min_words: usize,
    pub lead_max_words: usize,
    pub body_min_words: usize,
    pub body_max_words: usize,
    pub overlap_threshold: f64,
    pub lead_sentence_count: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            lead_min_words: 10,
            lead_max_words: 150,
            body_min_words: 150,
            body_max_words: 1200,
            overlap_threshold: 0.65,
            lead_sentence_count: 3,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lead_min_words >= self.lead_max_words {
            return Err(Error::Config("lead word range is empty".into()));
        }
        if self.body_min_words >= self.body_max_words {
            return Err(Error::Config("body word range is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::Config("overlap threshold outside [0,1]".into()));
        }
        if self.lead_sentence_count == 0 {
            return Err(Error::Config("lead must contain at least one sentence".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorruptionSpec {
    pub insertion_low: f64,
    pub insertion_high: f64,
    pub shuffle_fraction: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec { insertion_low: 0.40, insertion_high: 0.50, shuffle_fraction: 0.20 }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.insertion_low && self.insertion_low <= self.insertion_high) {
            return Err(Error::Config("insertion range must satisfy 0 <= low <= high".into()));
        }
        if !(0.0..=1.0).contains(&self.shuffle_fraction) {
            return Err(Error::Config("shuffle fraction outside [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    TooFewLeadWords,
    TooManyLeadWords,
    BodyOutOfRange,
    LowOverlap,
    TooFewSentences,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Accepted,
    Rejected(RejectReason),
}

#[derive(Debug, Clone)]
pub struct ArticleRecord {
    pub id: String,
    pub raw: String,
    pub cleaned: String,
    pub sentences: Vec<String>,
    pub lead: String,
    pub body: String,
    pub verdict: Verdict,
    /// Lead-to-body overlap when the article had enough sentences to compute
    /// one, whatever the final verdict.
    pub overlap: Option<f64>,
}

// ---- cleaning ---------------------------------------------------------------

/// Prefix patterns stripped from article starts, applied repeatedly until
/// none match:
///   1. dateline with agency: `New York (CNN) -- `
///   2. bare agency credit: `(CNN) -- `
///   3. byline with date: `Adam Smith, June 3rd 2018: `
fn prefix_patterns() -> &'static Vec<Regex> {
    static PATTERNS: OnceLock<Vec<Regex>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let month = "(?:January|February|March|April|May|June|July|August|September|October|\
                     November|December|Jan|Feb|Mar|Apr|Jun|Jul|Aug|Sept?|Oct|Nov|Dec)\\.?";
        vec![
            Regex::new(
                r"^[A-Z][A-Za-z.'-]*(?:[ ,]+[A-Za-z.'-]+){0,5}\s*\([A-Za-z0-9 .&'-]{2,30}\)\s*(?:--|—|–)\s*",
            )
            .unwrap(),
            Regex::new(r"^\([A-Za-z0-9 .&'-]{2,30}\)\s*(?:--|—|–)\s*").unwrap(),
            Regex::new(&format!(
                r"^[A-Z][A-Za-z.'-]+(?: [A-Z][A-Za-z.'-]+){{0,3}},\s*{month} \d{{1,2}}(?:st|nd|rd|th)?,? \d{{4}}\s*:\s*"
            ))
            .unwrap(),
        ]
    })
}

/// Strip recognised media/byline/date prefixes. Idempotent: stripping loops
/// until no pattern matches, so a second pass finds nothing to remove.
pub fn clean_article(raw: &str) -> String {
    let mut text = raw.trim_start();
    loop {
        let mut stripped = false;
        for re in prefix_patterns() {
            if let Some(m) = re.find(text) {
                text = &text[m.end()..];
                stripped = true;
            }
        }
        if !stripped {
            break;
        }
    }
    text.trim().to_string()
}

// ---- sentence splitting -----------------------------------------------------

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "st", "mt", "gen", "sen", "rep", "gov", "capt", "sgt",
    "lt", "col", "maj", "rev", "jr", "sr", "vs", "etc", "inc", "ltd", "co", "corp", "fig",
    "al", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
];

fn is_abbreviation(word: &str) -> bool {
    // token preceding the period, without the period itself
    let w = word.trim_matches(|c: char| !c.is_alphanumeric() && c != '.');
    if w.is_empty() {
        return false;
    }
    // single-letter initials ("A. B. Smith") and dotted acronyms ("U.S.")
    if w.chars().count() == 1 && w.chars().all(|c| c.is_uppercase()) {
        return true;
    }
    if w.contains('.') {
        return true;
    }
    ABBREVIATIONS.contains(&w.to_lowercase().as_str())
}

/// Rule-based splitting: a sentence ends at `.`/`!`/`?` (plus any closing
/// quotes or brackets) when followed by whitespace and a capital letter,
/// unless the preceding token is a known abbreviation, an initial, or a
/// dotted acronym. The concatenation of the output preserves the input's
/// word sequence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '.' || c == '!' || c == '?' {
            // absorb closing quotes/brackets into the sentence
            let mut end = i + 1;
            while end < chars.len() && matches!(chars[end], '"' | '\'' | '\u{201d}' | '\u{2019}' | ')' | ']') {
                end += 1;
            }
            let mut next = end;
            while next < chars.len() && chars[next].is_whitespace() {
                next += 1;
            }
            let boundary = next > end
                && next < chars.len()
                && (chars[next].is_uppercase()
                    || matches!(chars[next], '"' | '\'' | '\u{201c}' | '\u{2018}'));
            let blocked = c == '.' && {
                let word: String =
                    chars[start..i].iter().rev().take_while(|ch| !ch.is_whitespace()).collect();
                is_abbreviation(&word.chars().rev().collect::<String>())
            };
            if boundary && !blocked {
                let s: String = chars[start..end].iter().collect();
                let s = s.trim();
                if !s.is_empty() {
                    sentences.push(s.to_string());
                }
                start = next;
                i = next;
                continue;
            }
        }
        i += 1;
    }
    let tail: String = chars[start..].iter().collect();
    let tail = tail.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

// ---- overlap and filtering --------------------------------------------------

/// Common English function words excluded from overlap scoring, including
/// fragments left when tokenization splits contractions.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "ain", "all", "am", "an", "and", "any",
    "are", "aren", "as", "at", "be", "because", "been", "before", "being", "below", "between",
    "both", "but", "by", "can", "cannot", "could", "couldn", "d", "did", "didn", "do", "does",
    "doesn", "doing", "don", "down", "during", "each", "few", "for", "from", "further", "had",
    "hadn", "has", "hasn", "have", "haven", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "isn", "it", "its", "itself",
    "just", "ll", "m", "ma", "me", "mightn", "more", "most", "mustn", "my", "myself", "needn",
    "no", "nor", "not", "now", "o", "of", "off", "on", "once", "only", "or", "other", "our",
    "ours", "ourselves", "out", "over", "own", "re", "s", "same", "shan", "she", "should",
    "shouldn", "so", "some", "such", "t", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "ve", "very", "was", "wasn", "we", "were", "weren", "what", "when",
    "where", "which", "while", "who", "whom", "why", "will", "with", "won", "would", "wouldn",
    "y", "you", "your", "yours", "yourself", "yourselves",
];

pub fn stopword_set() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub ratio: f64,
    /// The lead had no non-stopword content, so the ratio is a forced zero.
    pub no_content: bool,
}

/// Fraction of the lead's unique non-stopword word types that also occur in
/// the body. Lowercased; types, not occurrences.
pub fn overlap_ratio(lead: &str, body: &str, stopwords: &HashSet<&str>) -> Overlap {
    let lead_types: HashSet<String> = words(lead)
        .into_iter()
        .filter(|w| !stopwords.contains(w.as_str()))
        .collect();
    if lead_types.is_empty() {
        return Overlap { ratio: 0.0, no_content: true };
    }
    let body_types: HashSet<String> = words(body).into_iter().collect();
    let hits = lead_types.iter().filter(|t| body_types.contains(*t)).count();
    Overlap { ratio: hits as f64 / lead_types.len() as f64, no_content: false }
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Clean, split, partition into lead and body, and apply the filter rules.
/// Sentence sufficiency is checked before anything else (with too few
/// sentences there is no body to judge); the remaining rules run in order:
/// lead too short, lead too long, body out of range, low overlap. The lead
/// and body partition the sentence list exactly.
pub fn process_article(id: &str, raw: &str, cfg: &FilterConfig) -> ArticleRecord {
    let cleaned = clean_article(raw);
    let sentences = split_sentences(&cleaned);
    let lead_n = cfg.lead_sentence_count.min(sentences.len());
    let lead = sentences[..lead_n].join(" ");
    let body = sentences[lead_n..].join(" ");

    let (verdict, overlap) = if sentences.len() < cfg.lead_sentence_count + 1 {
        (Verdict::Rejected(RejectReason::TooFewSentences), None)
    } else {
        let ov = overlap_ratio(&lead, &body, stopword_set());
        let lead_words = word_count(&lead);
        let body_words = word_count(&body);
        let verdict = if lead_words < cfg.lead_min_words {
            Verdict::Rejected(RejectReason::TooFewLeadWords)
        } else if lead_words > cfg.lead_max_words {
            Verdict::Rejected(RejectReason::TooManyLeadWords)
        } else if body_words < cfg.body_min_words || body_words > cfg.body_max_words {
            Verdict::Rejected(RejectReason::BodyOutOfRange)
        } else if ov.ratio <= cfg.overlap_threshold {
            Verdict::Rejected(RejectReason::LowOverlap)
        } else {
            Verdict::Accepted
        };
        (verdict, Some(ov.ratio))
    };

    ArticleRecord {
        id: id.to_string(),
        raw: raw.to_string(),
        cleaned,
        sentences,
        lead,
        body,
        verdict,
        overlap,
    }
}

// ---- corruption -------------------------------------------------------------

/// Permutation `order` of `0..len` with `|order[j] - j| <= k` for every j;
/// apply as `output[j] = input[order[j]]`. Built by sorting indices on the
/// jittered key `i + uniform(0, k+1)`: an index can only be overtaken by
/// neighbours within k slots, which guarantees the bound. The check-and-
/// resample loop stays as a belt-and-braces guard.
pub fn bounded_permutation(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    loop {
        let mut keyed: Vec<(f64, usize)> = (0..len)
            .map(|i| (i as f64 + rng.gen_range(0.0..(k + 1) as f64), i))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
        if order.iter().enumerate().all(|(j, &i)| i.abs_diff(j) <= k) {
            return order;
        }
    }
}

/// Round up `frac * n` to a count, tolerating the slight excess of binary
/// fractions like 0.2 so that 0.2 * 10 stays 2 rather than becoming 3.
fn scaled_ceil(frac: f64, n: usize) -> usize {
    ((frac * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn scaled_floor(frac: f64, n: usize) -> usize {
    ((frac * n as f64) + 1e-9).floor().max(0.0) as usize
}

/// Add noise tokens and locally shuffle. Inserts m tokens drawn uniformly
/// from `noise_pool` at uniform positions, with m chosen so the result
/// length lands in [ceil((1+low)n), floor((1+high)n)] and at least one
/// insertion happens; then applies a bounded permutation with displacement
/// limit k = max(1, ceil(shuffle_fraction * n)), where n is the original
/// length.
pub fn corrupt(
    tokens: &[u32],
    noise_pool: &[u32],
    spec: &CorruptionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    spec.validate()?;
    if tokens.is_empty() {
        return Err(Error::arg("corrupt", "empty token sequence"));
    }
    if noise_pool.is_empty() {
        return Err(Error::arg("corrupt", "empty noise pool"));
    }
    let n = tokens.len();
    let m_lo = scaled_ceil(1.0 + spec.insertion_low, n).saturating_sub(n).max(1);
    let m_hi = scaled_floor(1.0 + spec.insertion_high, n).saturating_sub(n).max(m_lo);
    let m = rng.gen_range(m_lo..=m_hi);

    let mut seq = tokens.to_vec();
    for _ in 0..m {
        let tok = noise_pool[rng.gen_range(0..noise_pool.len())];
        let pos = rng.gen_range(0..=seq.len());
        seq.insert(pos, tok);
    }

    let k = scaled_ceil(spec.shuffle_fraction, n).max(1);
    let order = bounded_permutation(seq.len(), k, rng);
    Ok(order.into_iter().map(|i| seq[i]).collect())
}

// ---- theme-pair sampling ------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ThemePair {
    /// Two adjacent windows from the same article.
    pub a1: Vec<u32>,
    pub a2: Vec<u32>,
    /// A window from a different article.
    pub b1: Vec<u32>,
    pub same_article: usize,
    pub other_article: usize,
    /// Offset of `a1` within its article.
    pub a_start: usize,
}

/// Draw two adjacent non-overlapping token windows from one article and one
/// window from another. Windows are `window` tokens long when the article
/// allows, shrinking only on short articles.
pub fn sample_theme_pairs(
    dataset: &[Vec<u32>],
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ThemePair> {
    if window == 0 {
        return Err(Error::arg("sample_theme_pairs", "window must be positive"));
    }
    if dataset.len() < 2 {
        return Err(Error::Data("theme pairs need at least two articles".into()));
    }
    let eligible: Vec<usize> =
        (0..dataset.len()).filter(|&i| dataset[i].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Data("no article long enough for two windows".into()));
    }
    let same = eligible[rng.gen_range(0..eligible.len())];
    let article = &dataset[same];
    let w = window.min(article.len() / 2);
    let a_start = rng.gen_range(0..=article.len() - 2 * w);
    let a1 = article[a_start..a_start + w].to_vec();
    let a2 = article[a_start + w..a_start + 2 * w].to_vec();

    let others: Vec<usize> =
        (0..dataset.len()).filter(|&i| i != same && !dataset[i].is_empty()).collect();
    if others.is_empty() {
        return Err(Error::Data("no second article with content".into()));
    }
    let other = others[rng.gen_range(0..others.len())];
    let ob = &dataset[other];
    let wb = window.min(ob.len());
    let b_start = rng.gen_range(0..=ob.len() - wb);
    let b1 = ob[b_start..b_start + wb].to_vec();

    Ok(ThemePair { a1, a2, b1, same_article: same, other_article: other, a_start })
}

/// `[CLS] a [SEP] b` with segment ids 0 across `[CLS] a [SEP]` and 1 over b.
pub fn pack_pair(a: &[u32], b: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut packed = Vec::with_capacity(a.len() + b.len() + 2);
    packed.push(crate::tokenizer::CLS);
    packed.extend_from_slice(a);
    packed.push(crate::tokenizer::SEP);
    let mut segments = vec![0u32; packed.len()];
    packed.extend_from_slice(b);
    segments.extend(std::iter::repeat(1).take(b.len()));
    (packed, segments)
}

// ---- corpus files -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawArticle {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AcceptedArticle {
    pub id: String,
    pub text: String,
    pub lead: String,
    pub body: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RejectedArticle {
    pub id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct PrepStats {
    pub total: u64,
    pub accepted: u64,
    pub rejected: BTreeMap<String, u64>,
    /// Overlap-ratio counts over 20 equal bins spanning [0,1], for every
    /// article whose overlap was computable.
    pub overlap_histogram: Vec<u64>,
}

pub struct ReadOutcome {
    pub articles: Vec<RawArticle>,
    /// (1-based line number, parse error) for lines skipped as malformed.
    pub skipped: Vec<(usize, String)>,
}

/// Line-delimited article records. Malformed lines are reported and skipped
/// rather than aborting the run; blank lines are ignored.
pub fn read_articles(path: &Path) -> Result<ReadOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut articles = Vec::new();
    let mut skipped = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawArticle>(&line) {
            Ok(a) => articles.push(a),
            Err(e) => skipped.push((idx + 1, e.to_string())),
        }
    }
    Ok(ReadOutcome { articles, skipped })
}

pub fn prep_corpus(articles: &[RawArticle], cfg: &FilterConfig) -> Result<Vec<ArticleRecord>> {
    cfg.validate()?;
    Ok(articles.iter().map(|a| process_article(&a.id, &a.text, cfg)).collect())
}

pub fn prep_stats(records: &[ArticleRecord]) -> PrepStats {
    let mut stats = PrepStats {
        total: records.len() as u64,
        overlap_histogram: vec![0; 20],
        ..PrepStats::default()
    };
    for rec in records {
        match &rec.verdict {
            Verdict::Accepted => stats.accepted += 1,
            Verdict::Rejected(reason) => {
                *stats.rejected.entry(format!("{reason:?}")).or_insert(0) += 1;
            }
        }
        if let Some(ov) = rec.overlap {
            let bin = ((ov * 20.0) as usize).min(19);
            stats.overlap_histogram[bin] += 1;
        }
    }
    stats
}
