//! Byte pair encoding: greedy character-pair merging learned from a corpus,
//! applied per word with `@@` continuation marks on non-final subwords.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{Sentence, CONTINUATION_MARK};
use crate::error::{Error, Result};

/// Internal end-of-word sentinel carried by the word-final unit while
/// learning and applying merges. Without it, word-final and word-internal
/// units would conflate.
const END_OF_WORD: &str = "</w>";

const TABLE_HEADER: &str = "#version: semunit-bpe 1";

/// Ordered merge rules; priority is the list index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeMergeTable {
    merges: Vec<(String, String)>,
}

impl BpeMergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        BpeMergeTable { merges }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Table truncated to its first `k` merges.
    pub fn prefix(&self, k: usize) -> BpeMergeTable {
        BpeMergeTable {
            merges: self.merges[..k.min(self.merges.len())].to_vec(),
        }
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
        Ok(BpeMergeTable { merges })
    }
}

/// A sentence segmented into subwords; the continuation mark is embedded in
/// the stored strings (`train@@ ing`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordSentence {
    subwords: Vec<String>,
}

impl SubwordSentence {
    pub fn from_subwords(subwords: Vec<String>) -> Self {
        SubwordSentence { subwords }
    }

    pub fn subwords(&self) -> &[String] {
        &self.subwords
    }

    pub fn len(&self) -> usize {
        self.subwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subwords.is_empty()
    }

    /// Index ranges grouping subwords into the words they came from.
    /// Errors on a continuation mark at sentence end.
    pub fn word_groups(&self) -> Result<Vec<(usize, usize)>> {
        let mut groups = Vec::new();
        let mut start = 0;
        for (i, sub) in self.subwords.iter().enumerate() {
            if !sub.ends_with(CONTINUATION_MARK) {
                groups.push((start, i + 1));
                start = i + 1;
            }
        }
        if start != self.subwords.len() {
            return Err(Error::TrailingContinuation {
                subword: self.subwords.last().cloned().unwrap_or_default(),
            });
        }
        Ok(groups)
    }
}

impl std::fmt::Display for SubwordSentence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.subwords.join(" "))
    }
}

/// Splits a word into its learning-time units: one unit per character, the
/// last carrying the end-of-word sentinel.
fn word_units(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Merges every adjacent occurrence of `pair` left to right, skipping
/// overlaps.
fn merge_pair_in(units: &mut Vec<String>, pair: (&str, &str)) {
    let mut out = Vec::with_capacity(units.len());
    let mut i = 0;
    while i < units.len() {
        if i + 1 < units.len() && units[i] == pair.0 && units[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(std::mem::take(&mut units[i]));
            i += 1;
        }
    }
    *units = out;
}

/// Learns a merge table: repeatedly merge the most frequent adjacent unit
/// pair, frequency weighted by word frequency. Ties go to the
/// lexicographically smaller (left, right). Stops early once the best pair
/// occurs fewer than twice.
pub fn learn_bpe(corpus: &[Sentence], num_merges: usize) -> Result<BpeMergeTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for sentence in corpus {
        for token in sentence.tokens() {
            *word_freq.entry(token.clone()).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, c)| (word_units(&w), c))
        .collect();

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut pair_freq: HashMap<(String, String), u64> = HashMap::new();
        for (units, count) in &words {
            for pair in units.windows(2) {
                *pair_freq
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += count;
            }
        }
        let best = pair_freq
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let (pair, count) = match best {
            Some(found) => found,
            None => break,
        };
        if count < 2 {
            break;
        }
        for (units, _) in &mut words {
            merge_pair_in(units, (&pair.0, &pair.1));
        }
        merges.push(pair);
    }
    Ok(BpeMergeTable { merges })
}

/// Segments one word with the table. Lowest-priority applicable merge first,
/// all its occurrences at once, until none applies.
fn apply_word(word: &str, ranks: &HashMap<(&str, &str), usize>) -> Vec<String> {
    let mut units = word_units(word);
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
    // Convert to surface form: drop the sentinel, mark non-final subwords.
    let n = units.len();
    units
        .into_iter()
        .enumerate()
        .map(|(i, u)| {
            if i + 1 == n {
                u.strip_suffix(END_OF_WORD).unwrap_or(&u).to_owned()
            } else {
                format!("{u}{CONTINUATION_MARK}")
            }
        })
        .collect()
}

/// Applies a merge table to a whole sentence. Unknown characters pass
/// through as singleton subwords.
pub fn apply_bpe(sentence: &Sentence, table: &BpeMergeTable) -> SubwordSentence {
    let ranks = table.rank_map();
    let mut subwords = Vec::with_capacity(sentence.len());
    for word in sentence.tokens() {
        subwords.extend(apply_word(word, &ranks));
    }
    SubwordSentence { subwords }
}

/// Word-segmentation helper reused by span extraction: subwords of a single
/// word, marks included.
pub(crate) fn segment_word(word: &str, table: &BpeMergeTable) -> Vec<String> {
    apply_word(word, &table.rank_map())
}

/// Rejoins marked subwords into the original words.
pub fn strip_bpe(sentence: &SubwordSentence) -> Result<Sentence> {
    let mut words = Vec::new();
    let mut current = String::new();
    for sub in &sentence.subwords {
        match sub.strip_suffix(CONTINUATION_MARK) {
            Some(head) => current.push_str(head),
            None => {
                current.push_str(sub);
                words.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        return Err(Error::TrailingContinuation {
            subword: sentence.subwords.last().cloned().unwrap_or_default(),
        });
    }
    Ok(Sentence::from_tokens(words))
}

/// Reads a segmented corpus (one sentence per line, subwords space-separated).
pub fn load_subword_corpus(path: impl AsRef<Path>) -> Result<Vec<SubwordSentence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let subwords: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        if subwords.is_empty() {
            return Err(Error::EmptyLine {
                path: path.to_owned(),
                line: i + 1,
            });
        }
        corpus.push(SubwordSentence { subwords });
    }
    Ok(corpus)
}

pub fn save_subword_corpus(
    path: impl AsRef<Path>,
    corpus: &[SubwordSentence],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for sentence in corpus {
        writeln!(out, "{sentence}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
