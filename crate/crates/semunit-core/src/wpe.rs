//! Word pair encoding: greedy word-pair merging under a normalized
//! co-occurrence score, phrase marking with the `#$&` joiner, and the
//! pipeline that turns a raw sentence into subwords plus semantic-unit spans.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bpe::{segment_word, BpeMergeTable, SubwordSentence};
use crate::corpus::{Sentence, JOINER};
use crate::error::{Error, Result};

const TABLE_HEADER: &str = "#version: semunit-wpe 1";

/// Default noise threshold in the merge score.
pub const DEFAULT_DELTA: f64 = 100.0;
/// Default number of merge operations.
pub const DEFAULT_MERGES: usize = 10_000;
/// Spans longer than this many subwords are decomposed.
pub const DEFAULT_MAX_SPAN: usize = 6;

/// Merge score for an adjacent unit pair: `(pair_count - delta) /
/// sqrt(c1 * c2)`. Negative scores are legal and mean "never merge".
pub fn wpe_score(pair_count: u64, c1: u64, c2: u64, delta: f64) -> f64 {
    (pair_count as f64 - delta) / ((c1 as f64) * (c2 as f64)).sqrt()
}

/// Ordered word-pair merge rules; operands are words or previously merged
/// phrases containing the joiner.
#[derive(Clone, Debug, PartialEq)]
pub struct WpeMergeTable {
    merges: Vec<(String, String)>,
    delta: f64,
}

impl WpeMergeTable {
    pub fn new(merges: Vec<(String, String)>, delta: f64) -> Self {
        WpeMergeTable { merges, delta }
    }

    /// Table with no merges; applying it is the identity.
    pub fn empty() -> Self {
        WpeMergeTable {
            merges: Vec::new(),
            delta: DEFAULT_DELTA,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    fn rank_map(&self) -> HashMap<(&str, &str), usize> {
        self.merges
            .iter()
            .enumerate()
            .map(|(i, (l, r))| ((l.as_str(), r.as_str()), i))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        writeln!(out, "{TABLE_HEADER}").map_err(|e| Error::io(path, e))?;
        writeln!(out, "#delta: {}", self.delta).map_err(|e| Error::io(path, e))?;
        for (l, r) in &self.merges {
            writeln!(out, "{l} {r}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        match lines.next() {
            Some((_, Ok(header))) if header == TABLE_HEADER => {}
            _ => {
                return Err(Error::Format {
                    path: path.to_owned(),
                    line: 1,
                    msg: format!("expected header {TABLE_HEADER:?}"),
                })
            }
        }
        let delta = match lines.next() {
            Some((_, Ok(line))) => line
                .strip_prefix("#delta: ")
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Format {
                    path: path.to_owned(),
                    line: 2,
                    msg: "expected `#delta: <value>`".into(),
                })?,
            _ => {
                return Err(Error::Format {
                    path: path.to_owned(),
                    line: 2,
                    msg: "missing `#delta:` line".into(),
                })
            }
        };
        let mut merges = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| Error::Format {
                path: path.to_owned(),
                line: i + 1,
                msg: "expected `left right`".into(),
            })?;
            merges.push((l.to_owned(), r.to_owned()));
        }
        Ok(WpeMergeTable { merges, delta })
    }
}

fn merge_pair_in(units: &mut Vec<String>, pair: (&str, &str)) {
    let mut out = Vec::with_capacity(units.len());
    let mut i = 0;
    while i < units.len() {
        if i + 1 < units.len() && units[i] == pair.0 && units[i + 1] == pair.1 {
            out.push(format!("{}{JOINER}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(std::mem::take(&mut units[i]));
            i += 1;
        }
    }
    *units = out;
}

/// Learns a merge table: repeatedly merge the adjacent unit pair with the
/// highest score, recounting exactly after every merge, until `num_merges`
/// rules are recorded or the best score drops to zero or below.
///
/// Ties break on higher pair count, then lexicographically smaller
/// (left, right).
pub fn learn_wpe(corpus: &[Sentence], num_merges: usize, delta: f64) -> Result<WpeMergeTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut sentences: Vec<Vec<String>> = corpus
        .iter()
        .map(|s| s.tokens().to_vec())
        .collect();

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let best = best_pair(&sentences, delta);
        let (pair, score) = match best {
            Some(found) => found,
            None => break,
        };
        if score <= 0.0 {
            break;
        }
        for units in &mut sentences {
            merge_pair_in(units, (&pair.0, &pair.1));
        }
        merges.push(pair);
    }
    Ok(WpeMergeTable { merges, delta })
}

/// Scores every adjacent pair on the current corpus state and returns the
/// winner under the (score, pair count, lexicographic) order.
fn best_pair(sentences: &[Vec<String>], delta: f64) -> Option<((String, String), f64)> {
    let mut unigram: HashMap<&str, u64> = HashMap::new();
    let mut bigram: HashMap<(&str, &str), u64> = HashMap::new();
    for units in sentences {
        for u in units {
            *unigram.entry(u).or_insert(0) += 1;
        }
        for w in units.windows(2) {
            *bigram.entry((&w[0], &w[1])).or_insert(0) += 1;
        }
    }
    bigram
        .into_iter()
        .map(|((l, r), n)| {
            let score = wpe_score(n, unigram[l], unigram[r], delta);
            ((l, r), n, score)
        })
        .max_by(|(pa, na, sa), (pb, nb, sb)| {
            sa.partial_cmp(sb)
                .expect("scores are finite")
                .then(na.cmp(nb))
                .then_with(|| pb.cmp(pa))
        })
        .map(|((l, r), _, score)| ((l.to_owned(), r.to_owned()), score))
}

/// Applies merges in priority order; output tokens are words or
/// joiner-joined phrases.
pub fn apply_wpe(sentence: &Sentence, table: &WpeMergeTable) -> Sentence {
    let ranks = table.rank_map();
    let mut units = sentence.tokens().to_vec();
    loop {
        let mut best: Option<(usize, (String, String))> = None;
        for pair in units.windows(2) {
            if let Some(&rank) = ranks.get(&(pair[0].as_str(), pair[1].as_str())) {
                if best.as_ref().is_none_or(|(r, _)| rank < *r) {
                    best = Some((rank, (pair[0].clone(), pair[1].clone())));
                }
            }
        }
        match best {
            Some((_, pair)) => merge_pair_in(&mut units, (&pair.0, &pair.1)),
            None => break,
        }
    }
    Sentence::from_tokens(units)
}

/// A half-open span of subword indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, index: usize) -> bool {
        index >= self.start && index < self.end
    }
}

/// A partition of `[0, sentence_len)` into contiguous semantic-unit spans:
/// sorted, non-overlapping, gap-free, every span nonempty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanSet {
    spans: Vec<Span>,
    sentence_len: usize,
}

impl SpanSet {
    pub fn new(spans: Vec<Span>, sentence_len: usize) -> Result<Self> {
        let mut cursor = 0;
        for span in &spans {
            if span.start != cursor {
                return Err(Error::InvalidSpans(format!(
                    "expected span starting at {cursor}, found {span:?}"
                )));
            }
            if span.is_empty() {
                return Err(Error::InvalidSpans(format!("empty span {span:?}")));
            }
            cursor = span.end;
        }
        if cursor != sentence_len {
            return Err(Error::InvalidSpans(format!(
                "spans cover [0, {cursor}) but sentence length is {sentence_len}"
            )));
        }
        Ok(SpanSet {
            spans,
            sentence_len,
        })
    }

    /// All-singleton partition.
    pub fn singletons(sentence_len: usize) -> Self {
        SpanSet {
            spans: (0..sentence_len).map(|i| Span::new(i, i + 1)).collect(),
            sentence_len,
        }
    }

    /// Rebuilds a full partition from its multi-token spans only.
    pub fn from_multi_spans(mut multi: Vec<Span>, sentence_len: usize) -> Result<Self> {
        multi.sort();
        let mut spans = Vec::new();
        let mut cursor = 0;
        for span in multi {
            if span.len() < 2 {
                return Err(Error::InvalidSpans(format!(
                    "listed span {span:?} is not multi-token"
                )));
            }
            if span.start < cursor || span.end > sentence_len {
                return Err(Error::InvalidSpans(format!(
                    "span {span:?} overlaps or exceeds sentence length {sentence_len}"
                )));
            }
            for i in cursor..span.start {
                spans.push(Span::new(i, i + 1));
            }
            spans.push(span);
            cursor = span.end;
        }
        for i in cursor..sentence_len {
            spans.push(Span::new(i, i + 1));
        }
        SpanSet::new(spans, sentence_len)
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn sentence_len(&self) -> usize {
        self.sentence_len
    }

    /// Number of spans (the semantic-stream length).
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn multi_spans(&self) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(|s| s.len() >= 2)
    }

    pub fn multi_token_count(&self) -> usize {
        self.multi_spans().count()
    }

    pub fn max_span_len(&self) -> usize {
        self.spans.iter().map(Span::len).max().unwrap_or(0)
    }
}

/// Which token groups count as semantic units during span extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// WPE phrases and multi-subword words (the default pipeline).
    WpeAndBpe,
    /// Multi-subword words only.
    BpeOnly,
    /// WPE phrases only; words split by BPE stay singletons.
    WpeOnly,
}

/// Runs the span-extraction pipeline on one sentence: WPE marks phrases,
/// BPE segments each word (joiners removed first, so the subword text is
/// byte-identical to plain BPE on the raw sentence), and spans are emitted
/// per semantic unit. Spans longer than `max_span` subwords decompose into
/// word-level sub-spans; a single word longer than `max_span` subwords
/// decomposes into singletons.
pub fn extract_spans(
    sentence: &Sentence,
    wpe: &WpeMergeTable,
    bpe: &BpeMergeTable,
    max_span: usize,
) -> Result<(SubwordSentence, SpanSet)> {
    extract_spans_mode(sentence, wpe, bpe, max_span, Granularity::WpeAndBpe)
}

pub fn extract_spans_mode(
    sentence: &Sentence,
    wpe: &WpeMergeTable,
    bpe: &BpeMergeTable,
    max_span: usize,
    granularity: Granularity,
) -> Result<(SubwordSentence, SpanSet)> {
    let phrases_on = granularity != Granularity::BpeOnly;
    let words_on = granularity != Granularity::WpeOnly;
    let marked = if phrases_on {
        apply_wpe(sentence, wpe)
    } else {
        sentence.clone()
    };

    let mut subwords: Vec<String> = Vec::new();
    let mut spans: Vec<Span> = Vec::new();

    // Emits one unit either as a whole span or decomposed per word.
    let emit_words = |spans: &mut Vec<Span>, word_lens: &[(usize, usize)]| {
        for &(start, len) in word_lens {
            if words_on && len >= 2 && len <= max_span {
                spans.push(Span::new(start, start + len));
            } else {
                for i in start..start + len {
                    spans.push(Span::new(i, i + 1));
                }
            }
        }
    };

    for unit in marked.tokens() {
        let words: Vec<&str> = unit.split(JOINER).collect();
        let unit_start = subwords.len();
        let mut word_lens = Vec::with_capacity(words.len());
        for word in &words {
            let segs = segment_word(word, bpe);
            word_lens.push((subwords.len(), segs.len()));
            subwords.extend(segs);
        }
        let unit_len = subwords.len() - unit_start;
        if words.len() > 1 && unit_len <= max_span {
            spans.push(Span::new(unit_start, unit_start + unit_len));
        } else {
            emit_words(&mut spans, &word_lens);
        }
    }

    let len = subwords.len();
    Ok((
        SubwordSentence::from_subwords(subwords),
        SpanSet::new(spans, len)?,
    ))
}

/// Draws non-overlapping multi-token spans (lengths 2..=6 uniform over the
/// lengths that still fit) until the covered fraction reaches
/// `target_ratio` or no room remains; everything else is a singleton.
pub fn random_spans(sentence_len: usize, target_ratio: f64, seed: u64) -> SpanSet {
    const MIN_LEN: usize = 2;
    const MAX_LEN: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut free = vec![true; sentence_len];
    let mut chosen: Vec<Span> = Vec::new();
    let mut covered = 0usize;

    loop {
        if sentence_len == 0 || covered as f64 / sentence_len as f64 >= target_ratio {
            break;
        }
        let starts_for = |len: usize, free: &[bool]| -> Vec<usize> {
            (0..sentence_len.saturating_sub(len - 1))
                .filter(|&s| free[s..s + len].iter().all(|&f| f))
                .collect()
        };
        let lens: Vec<usize> = (MIN_LEN..=MAX_LEN)
            .filter(|&l| !starts_for(l, &free).is_empty())
            .collect();
        if lens.is_empty() {
            break;
        }
        let len = lens[rng.gen_range(0..lens.len())];
        let starts = starts_for(len, &free);
        let start = starts[rng.gen_range(0..starts.len())];
        free[start..start + len].iter_mut().for_each(|f| *f = false);
        covered += len;
        chosen.push(Span::new(start, start + len));
    }

    SpanSet::from_multi_spans(chosen, sentence_len).expect("drawn spans are disjoint")
}

/// Writes one line per sentence: space-separated `start-end` pairs for
/// multi-token spans only (singletons implied).
pub fn save_span_file(path: impl AsRef<Path>, spansets: &[SpanSet]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for set in spansets {
        let line = set
            .multi_spans()
            .map(|s| format!("{}-{}", s.start, s.end))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads a span file back; `sentence_lens` supplies the subword length of
/// each sentence so singleton gaps can be restored.
pub fn load_span_file(path: impl AsRef<Path>, sentence_lens: &[usize]) -> Result<Vec<SpanSet>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i >= sentence_lens.len() {
            return Err(Error::SpanMismatch(format!(
                "span file has more lines than the corpus ({} sentences)",
                sentence_lens.len()
            )));
        }
        let mut multi = Vec::new();
        for field in line.split_whitespace() {
            let parsed = field.split_once('-').and_then(|(s, e)| {
                Some(Span::new(s.parse().ok()?, e.parse().ok()?))
            });
            match parsed {
                Some(span) => multi.push(span),
                None => {
                    return Err(Error::Format {
                        path: path.to_owned(),
                        line: i + 1,
                        msg: format!("bad span field {field:?}"),
                    })
                }
            }
        }
        sets.push(SpanSet::from_multi_spans(multi, sentence_lens[i])?);
    }
    if sets.len() != sentence_lens.len() {
        return Err(Error::SpanMismatch(format!(
            "span file has {} lines but corpus has {} sentences",
            sets.len(),
            sentence_lens.len()
        )));
    }
    Ok(sets)
}

/// Convenience: run extraction over a corpus with the default granularity.
pub fn extract_corpus_spans(
    corpus: &[Sentence],
    wpe: &WpeMergeTable,
    bpe: &BpeMergeTable,
    max_span: usize,
    granularity: Granularity,
) -> Result<(Vec<SubwordSentence>, Vec<SpanSet>)> {
    let mut subwords = Vec::with_capacity(corpus.len());
    let mut spans = Vec::with_capacity(corpus.len());
    for sentence in corpus {
        let (sw, sp) = extract_spans_mode(sentence, wpe, bpe, max_span, granularity)?;
        subwords.push(sw);
        spans.push(sp);
    }
    Ok((subwords, spans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{apply_bpe, learn_bpe};
    use proptest::prelude::*;

    fn sent(tokens: &[&str]) -> Sentence {
        Sentence::from(tokens)
    }

    fn ny_corpus() -> Vec<Sentence> {
        vec![
            sent(&["new", "york", "is", "big"]),
            sent(&["new", "york", "is", "old"]),
            sent(&["i", "love", "new", "york"]),
        ]
    }

    #[test]
    fn score_unit_values() {
        assert_eq!(wpe_score(100, 100, 100, 100.0), 0.0);
        assert_eq!(wpe_score(3, 3, 3, 0.0), 1.0);
        assert!((wpe_score(3, 3, 3, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn learns_new_york_first() {
        // (new, york) scores 3/sqrt(9) = 1.0; (i, love) ties at 1/sqrt(1)
        // but has the lower pair count, so the frequent collocation wins.
        let table = learn_wpe(&ny_corpus(), 1, 0.0).unwrap();
        assert_eq!(table.merges(), &[("new".to_string(), "york".to_string())]);
    }

    #[test]
    fn large_delta_learns_nothing() {
        let table = learn_wpe(&ny_corpus(), 10, 100.0).unwrap();
        assert!(table.is_empty());
    }

    #[test]
    fn equal_score_and_count_breaks_lexicographically() {
        // (a, b) and (c, d) are symmetric: same counts, same score.
        let corpus = vec![sent(&["a", "b"]), sent(&["c", "d"]), sent(&["a", "b"]), sent(&["c", "d"])];
        let table = learn_wpe(&corpus, 1, 0.0).unwrap();
        assert_eq!(table.merges(), &[("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn apply_merges_phrase_with_joiner() {
        let table = WpeMergeTable::new(vec![("new".into(), "york".into())], 0.0);
        let out = apply_wpe(&sent(&["new", "york", "is", "big"]), &table);
        assert_eq!(out.tokens(), &["new#$&york", "is", "big"]);
    }

    #[test]
    fn apply_empty_table_is_identity() {
        let s = sent(&["a", "b", "c"]);
        assert_eq!(apply_wpe(&s, &WpeMergeTable::empty()), s);
    }

    #[test]
    fn apply_without_matches_is_identity() {
        let table = WpeMergeTable::new(vec![("x".into(), "y".into())], 0.0);
        let s = sent(&["a", "b"]);
        assert_eq!(apply_wpe(&s, &table), s);
    }

    #[test]
    fn nested_merges_apply_in_priority_order() {
        let table = WpeMergeTable::new(
            vec![
                ("new".into(), "york".into()),
                ("new#$&york".into(), "city".into()),
            ],
            0.0,
        );
        let out = apply_wpe(&sent(&["new", "york", "city"]), &table);
        assert_eq!(out.tokens(), &["new#$&york#$&city"]);
    }

    #[test]
    fn table_file_roundtrip() {
        let table = learn_wpe(&ny_corpus(), 3, 0.5).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        table.save(f.path()).unwrap();
        assert_eq!(WpeMergeTable::load(f.path()).unwrap(), table);
    }

    #[test]
    fn extracts_phrase_span() {
        let wpe = WpeMergeTable::new(vec![("new".into(), "york".into())], 0.0);
        let bpe = learn_bpe(&[sent(&["new", "york"]), sent(&["new", "york"])], 20).unwrap();
        let (subwords, spans) = extract_spans(&sent(&["new", "york"]), &wpe, &bpe, 6).unwrap();
        assert_eq!(subwords.subwords(), &["new", "york"]);
        assert_eq!(spans.spans(), &[Span::new(0, 2)]);
    }

    #[test]
    fn multi_subword_word_becomes_span() {
        let bpe = BpeMergeTable::new(vec![
            ("t".into(), "r".into()),
            ("tr".into(), "a".into()),
            ("tra".into(), "i".into()),
            ("trai".into(), "n".into()),
            ("i".into(), "n".into()),
            ("in".into(), "g</w>".into()),
        ]);
        let (subwords, spans) =
            extract_spans(&sent(&["training"]), &WpeMergeTable::empty(), &bpe, 6).unwrap();
        assert_eq!(subwords.subwords(), &["train@@", "ing"]);
        assert_eq!(spans.spans(), &[Span::new(0, 2)]);
    }

    #[test]
    fn no_rules_no_splits_gives_singletons() {
        let corpus = vec![sent(&["a", "b", "c"]); 3];
        let bpe = learn_bpe(&corpus, 0).unwrap();
        let (_, spans) =
            extract_spans(&sent(&["a", "b", "c"]), &WpeMergeTable::empty(), &bpe, 6).unwrap();
        assert_eq!(spans.spans().len(), 3);
        assert_eq!(spans.multi_token_count(), 0);
    }

    #[test]
    fn oversized_phrase_decomposes_to_words() {
        // Seven one-subword words in one phrase: span of 7 > 6 decomposes
        // into singletons (each word is a single subword).
        let words: Vec<String> = (0..7).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let mut merges = Vec::new();
        let mut acc = words[0].clone();
        for w in &words[1..] {
            merges.push((acc.clone(), w.clone()));
            acc = format!("{acc}{JOINER}{w}");
        }
        let wpe = WpeMergeTable::new(merges, 0.0);
        let corpus = vec![Sentence::from(refs.as_slice()); 2];
        let bpe = learn_bpe(&corpus, 10).unwrap();
        let (_, spans) = extract_spans(&Sentence::from(refs.as_slice()), &wpe, &bpe, 6).unwrap();
        assert_eq!(spans.multi_token_count(), 0);
        assert_eq!(spans.len(), 7);
    }

    #[test]
    fn oversized_phrase_keeps_word_units() {
        // "ab ab ab ab" as one phrase: 4 words x 2 subwords = 8 > 6, so it
        // decomposes into four 2-subword word spans.
        let wpe = WpeMergeTable::new(
            vec![
                ("ab".into(), "ab".into()),
                (format!("ab{JOINER}ab"), format!("ab{JOINER}ab")),
            ],
            0.0,
        );
        let bpe = BpeMergeTable::default(); // splits "ab" into a@@ b
        let s = sent(&["ab", "ab", "ab", "ab"]);
        let (subwords, spans) = extract_spans(&s, &wpe, &bpe, 6).unwrap();
        assert_eq!(subwords.len(), 8);
        assert_eq!(spans.spans().len(), 4);
        assert!(spans.spans().iter().all(|sp| sp.len() == 2));
    }

    #[test]
    fn wpe_only_granularity_skips_word_units() {
        let bpe = BpeMergeTable::default();
        let wpe = WpeMergeTable::new(vec![("aa".into(), "bb".into())], 0.0);
        let s = sent(&["aa", "bb", "cc"]);
        let (_, spans) =
            extract_spans_mode(&s, &wpe, &bpe, 6, Granularity::WpeOnly).unwrap();
        // Phrase "aa bb" covers 4 subwords; "cc" splits into c@@ c but stays
        // singletons in this granularity.
        assert_eq!(spans.spans(), &[
            Span::new(0, 4),
            Span::new(4, 5),
            Span::new(5, 6),
        ]);
    }

    #[test]
    fn bpe_only_granularity_skips_phrases() {
        let bpe = BpeMergeTable::default();
        let wpe = WpeMergeTable::new(vec![("aa".into(), "bb".into())], 0.0);
        let s = sent(&["aa", "bb", "c"]);
        let (_, spans) =
            extract_spans_mode(&s, &wpe, &bpe, 6, Granularity::BpeOnly).unwrap();
        assert_eq!(spans.spans(), &[
            Span::new(0, 2),
            Span::new(2, 4),
            Span::new(4, 5),
        ]);
    }

    #[test]
    fn random_spans_zero_ratio_is_all_singletons() {
        let set = random_spans(10, 0.0, 7);
        assert_eq!(set.multi_token_count(), 0);
        assert_eq!(set.len(), 10);
    }

    #[test]
    fn random_spans_deterministic() {
        assert_eq!(random_spans(40, 0.5, 123), random_spans(40, 0.5, 123));
        assert_ne!(random_spans(40, 0.5, 123), random_spans(40, 0.5, 124));
    }

    #[test]
    fn random_spans_hit_target_coverage_in_expectation() {
        let target = 0.36;
        let len = 120;
        let mut total = 0.0;
        let runs = 200;
        for seed in 0..runs {
            let set = random_spans(len, target, seed);
            let covered: usize = set.multi_spans().map(Span::len).sum();
            total += covered as f64 / len as f64;
        }
        let mean = total / runs as f64;
        assert!((mean - target).abs() <= 0.05, "mean coverage {mean}");
    }

    #[test]
    fn span_file_roundtrip() {
        let sets = vec![
            SpanSet::from_multi_spans(vec![Span::new(1, 3)], 5).unwrap(),
            SpanSet::singletons(4),
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_span_file(f.path(), &sets).unwrap();
        let loaded = load_span_file(f.path(), &[5, 4]).unwrap();
        assert_eq!(loaded, sets);
    }

    #[test]
    fn spanset_rejects_bad_partitions() {
        assert!(SpanSet::new(vec![Span::new(0, 2), Span::new(3, 4)], 4).is_err());
        assert!(SpanSet::new(vec![Span::new(0, 2), Span::new(1, 4)], 4).is_err());
        assert!(SpanSet::new(vec![Span::new(0, 2)], 4).is_err());
        assert!(SpanSet::new(vec![Span::new(0, 0)], 0).is_err());
    }

    /// Brute-force replay: recounts and rescores every pair at each step.
    fn assert_greedy_steps_optimal(corpus: &[Sentence], table: &WpeMergeTable) {
        let mut sentences: Vec<Vec<String>> =
            corpus.iter().map(|s| s.tokens().to_vec()).collect();
        for merge in table.merges() {
            let mut unigram: HashMap<String, u64> = HashMap::new();
            let mut bigram: HashMap<(String, String), u64> = HashMap::new();
            for units in &sentences {
                for u in units {
                    *unigram.entry(u.clone()).or_insert(0) += 1;
                }
                for w in units.windows(2) {
                    *bigram.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
                }
            }
            let merge_count = bigram[merge];
            let merge_score =
                wpe_score(merge_count, unigram[&merge.0], unigram[&merge.1], table.delta());
            assert!(merge_score > 0.0);
            for (pair, count) in &bigram {
                let score = wpe_score(*count, unigram[&pair.0], unigram[&pair.1], table.delta());
                let worse = score < merge_score
                    || (score == merge_score && *count < merge_count)
                    || (score == merge_score && *count == merge_count && merge <= pair);
                assert!(
                    worse,
                    "pair {pair:?} (score {score}, n {count}) beats {merge:?} ({merge_score}, {merge_count})"
                );
            }
            for units in &mut sentences {
                merge_pair_in(units, (&merge.0, &merge.1));
            }
        }
    }

    #[test]
    fn greedy_steps_match_brute_force() {
        let table = learn_wpe(&ny_corpus(), 5, 0.0).unwrap();
        assert!(!table.is_empty());
        assert_greedy_steps_optimal(&ny_corpus(), &table);
    }

    fn sentence_strategy() -> impl Strategy<Value = Sentence> {
        prop::collection::vec("[a-e]{1,6}", 1..10).prop_map(Sentence::from_tokens)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn text_invariance_and_partition(
            sents in prop::collection::vec(sentence_strategy(), 1..6),
            wpe_merges in 0usize..6,
            bpe_merges in 0usize..12,
        ) {
            let bpe = learn_bpe(&sents, bpe_merges).unwrap();
            let wpe = learn_wpe(&sents, wpe_merges, 0.5).unwrap();
            for s in &sents {
                let (subwords, spans) = extract_spans(s, &wpe, &bpe, 6).unwrap();
                let plain = apply_bpe(s, &bpe);
                prop_assert_eq!(subwords.subwords(), plain.subwords());
                prop_assert!(spans.max_span_len() <= 6 || spans.spans().iter().all(|sp| sp.len() <= 6));
                prop_assert_eq!(spans.sentence_len(), plain.len());
            }
        }

        #[test]
        fn huge_delta_reduces_to_bpe_spans(s in sentence_strategy()) {
            let corpus = vec![s.clone(); 4];
            let bpe = learn_bpe(&corpus, 6).unwrap();
            let wpe = learn_wpe(&corpus, 10, 1e9).unwrap();
            prop_assert!(wpe.is_empty());
            let (_, with_wpe) = extract_spans(&s, &wpe, &bpe, 6).unwrap();
            let (_, bpe_only) =
                extract_spans_mode(&s, &WpeMergeTable::empty(), &bpe, 6, Granularity::BpeOnly)
                    .unwrap();
            prop_assert_eq!(with_wpe, bpe_only);
        }
    }
}
