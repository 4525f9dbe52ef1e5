//! Statistical evaluation: corpus BLEU-4, chrF, span-count bucketing, and
//! the alignment-based semantic-unit recall.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::bpe::SubwordSentence;
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::wpe::SpanSet;

const MAX_NGRAM: usize = 4;
const CHRF_MAX_NGRAM: usize = 6;
const CHRF_BETA: f64 = 2.0;

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the hypothesis n-gram total.
fn modified_matches(hyp: &[String], reference: &[String], n: usize) -> (u64, u64) {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let total: u64 = hyp_counts.values().sum();
    let matched = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Corpus BLEU-4: modified n-gram precisions with a plain geometric mean
/// (any zero precision yields 0) and the brevity penalty.
pub fn bleu(hyps: &[Sentence], refs: &[Sentence]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut matched = [0u64; MAX_NGRAM];
    let mut total = [0u64; MAX_NGRAM];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=MAX_NGRAM {
            let (m, t) = modified_matches(h.tokens(), r.tokens(), n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..MAX_NGRAM {
        if total[n] == 0 {
            // The corpus is too short to contain this order at all.
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        orders += 1;
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Sentence-level BLEU-4 for bucketing: precisions of order 2 and above get
/// add-one smoothing (sentence-level 4-gram zeros are routine), order 1
/// stays unsmoothed.
pub fn sentence_bleu(hyp: &Sentence, reference: &Sentence) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let (m, t) = modified_matches(hyp.tokens(), reference.tokens(), n);
        let p = if n == 1 {
            if m == 0 || t == 0 {
                return 0.0;
            }
            m as f64 / t as f64
        } else {
            (m + 1) as f64 / (t + 1) as f64
        };
        log_sum += p.ln();
    }
    let (h, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if h < r { (1.0 - r / h).exp() } else { 1.0 };
    100.0 * bp * (log_sum / MAX_NGRAM as f64).exp()
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], u64> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus chrF: character n-gram F-score (orders 1..=6, beta = 2) on
/// whitespace-stripped text. Statistics are pooled over the corpus per
/// order; orders with no n-grams on either side drop out of the average.
pub fn chrf(hyps: &[Sentence], refs: &[Sentence]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let strip = |s: &Sentence| -> Vec<char> {
        s.tokens().join("").chars().collect()
    };
    let mut matched = [0u64; CHRF_MAX_NGRAM];
    let mut hyp_total = [0u64; CHRF_MAX_NGRAM];
    let mut ref_total = [0u64; CHRF_MAX_NGRAM];
    for (h, r) in hyps.iter().zip(refs) {
        let hc = strip(h);
        let rc = strip(r);
        for n in 1..=CHRF_MAX_NGRAM {
            let hyp_counts = char_ngrams(&hc, n);
            let ref_counts = char_ngrams(&rc, n);
            hyp_total[n - 1] += hyp_counts.values().sum::<u64>();
            ref_total[n - 1] += ref_counts.values().sum::<u64>();
            matched[n - 1] += hyp_counts
                .iter()
                .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    let beta2 = CHRF_BETA * CHRF_BETA;
    let mut f_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..CHRF_MAX_NGRAM {
        if hyp_total[n] == 0 && ref_total[n] == 0 {
            continue;
        }
        orders += 1;
        let p = if hyp_total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / hyp_total[n] as f64
        };
        let r = if ref_total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / ref_total[n] as f64
        };
        if p + r > 0.0 {
            f_sum += (1.0 + beta2) * p * r / (beta2 * p + r);
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * f_sum / orders as f64)
}

/// One human-annotated word-alignment link (0-indexed).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignLink {
    pub src: usize,
    pub tgt: usize,
    pub sure: bool,
}

/// Per-sentence alignment links.
#[derive(Clone, Debug, Default)]
pub struct AlignmentSet {
    links: Vec<Vec<AlignLink>>,
}

impl AlignmentSet {
    pub fn new(links: Vec<Vec<AlignLink>>) -> Self {
        AlignmentSet { links }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn sentence(&self, i: usize) -> Option<&[AlignLink]> {
        self.links.get(i).map(Vec::as_slice)
    }

    /// Reads the common one-line-per-pair format: space-separated links,
    /// `i-j` for sure and `i?j` for possible, 1-indexed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut links = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut sentence = Vec::new();
            for field in line.split_whitespace() {
                let (sep, sure) = if field.contains('-') {
                    ('-', true)
                } else {
                    ('?', false)
                };
                let parsed = field.split_once(sep).and_then(|(a, b)| {
                    let i: usize = a.parse().ok()?;
                    let j: usize = b.parse().ok()?;
                    (i >= 1 && j >= 1).then(|| AlignLink {
                        src: i - 1,
                        tgt: j - 1,
                        sure,
                    })
                });
                match parsed {
                    Some(link) => sentence.push(link),
                    None => {
                        return Err(Error::Format {
                            path: path.to_owned(),
                            line: lineno + 1,
                            msg: format!("bad alignment field {field:?}"),
                        })
                    }
                }
            }
            links.push(sentence);
        }
        Ok(AlignmentSet { links })
    }
}

/// Which alignment labels the recall metric counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecallMode {
    Sure,
    SureAndPossible,
}

impl RecallMode {
    fn accepts(&self, link: &AlignLink) -> bool {
        match self {
            RecallMode::Sure => link.sure,
            RecallMode::SureAndPossible => true,
        }
    }
}

/// Recall of target-side words aligned to source-side semantic units: for
/// every link (under `mode`) whose source word lies inside a multi-token
/// span, the linked reference word is collected; recall is the
/// count-clipped fraction of collected words present in the hypothesis,
/// aggregated corpus-level.
///
/// Alignments are word-indexed while spans are subword-indexed, so the
/// segmented source (`src_subwords`) supplies the word-to-subword mapping.
/// Returns `None` when the corpus has no multi-token spans at all (the
/// metric is undefined then).
pub fn semantic_recall(
    hyps: &[Sentence],
    refs: &[Sentence],
    alignments: &AlignmentSet,
    spans: &[SpanSet],
    src_subwords: &[SubwordSentence],
    mode: RecallMode,
) -> Result<Option<f64>> {
    let n = hyps.len();
    if refs.len() != n || spans.len() != n || src_subwords.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} hyps, {} refs, {} span sets, {} source sentences",
            n,
            refs.len(),
            spans.len(),
            src_subwords.len()
        )));
    }
    let mut collected_total = 0u64;
    let mut matched_total = 0u64;
    for i in 0..n {
        let links = alignments
            .sentence(i)
            .ok_or(Error::MissingAlignment { index: i })?;
        let word_ranges = src_subwords[i].word_groups()?;
        if spans[i].sentence_len() != src_subwords[i].len() {
            return Err(Error::SpanMismatch(format!(
                "sentence {i}: spans cover {} subwords, text has {}",
                spans[i].sentence_len(),
                src_subwords[i].len()
            )));
        }
        let word_in_unit = |w: usize| -> Result<bool> {
            let &(lo, hi) = word_ranges.get(w).ok_or_else(|| {
                Error::InvalidAlignment(format!(
                    "sentence {i}: source index {w} out of {} words",
                    word_ranges.len()
                ))
            })?;
            Ok(spans[i]
                .multi_spans()
                .any(|s| s.start < hi && lo < s.end))
        };
        let mut collected: HashMap<&str, u64> = HashMap::new();
        for link in links {
            if !mode.accepts(link) || !word_in_unit(link.src)? {
                continue;
            }
            let word = refs[i].tokens().get(link.tgt).ok_or_else(|| {
                Error::InvalidAlignment(format!(
                    "sentence {i}: target index {} out of {} words",
                    link.tgt,
                    refs[i].len()
                ))
            })?;
            *collected.entry(word).or_insert(0) += 1;
        }
        if collected.is_empty() {
            continue;
        }
        let mut hyp_counts: HashMap<&str, u64> = HashMap::new();
        for t in hyps[i].tokens() {
            *hyp_counts.entry(t).or_insert(0) += 1;
        }
        for (word, count) in collected {
            collected_total += count;
            matched_total += count.min(hyp_counts.get(word).copied().unwrap_or(0));
        }
    }
    if collected_total == 0 {
        return Ok(None);
    }
    Ok(Some(matched_total as f64 / collected_total as f64))
}

/// Span-count bucket labels: sentences grouped by their number of
/// multi-token spans.
pub const BUCKET_LABELS: [&str; 5] = ["0", "1", "2", "3", ">=4"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bucket {
    pub count: usize,
    pub mean: Option<f64>,
}

/// Per-bucket sentence counts and metric means over the buckets
/// {0, 1, 2, 3, >=4}.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub buckets: [Bucket; 5],
}

impl BucketReport {
    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }
}

pub fn bucket_by_span_count(values: &[f64], spans: &[SpanSet]) -> Result<BucketReport> {
    if values.len() != spans.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} metric values vs {} span sets",
            values.len(),
            spans.len()
        )));
    }
    let mut sums = [0.0f64; 5];
    let mut counts = [0usize; 5];
    for (value, set) in values.iter().zip(spans) {
        let bucket = set.multi_token_count().min(4);
        sums[bucket] += value;
        counts[bucket] += 1;
    }
    let buckets = std::array::from_fn(|i| Bucket {
        count: counts[i],
        mean: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
    });
    Ok(BucketReport { buckets })
}
