//! Whitespace-tokenized corpora: loading, counting, vocabularies.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// BPE continuation mark appended to subwords that do not end a word.
pub const CONTINUATION_MARK: &str = "@@";
/// WPE joiner inserted between the words of a merged phrase.
pub const JOINER: &str = "#$&";

/// One whitespace-tokenized sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    /// Wraps pre-validated tokens. Invariants are checked where text enters
    /// the system ([`load_corpus`]), not on every construction.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Sentence { tokens }
    }

    /// Parses one corpus line: split on runs of whitespace, reject empty
    /// lines and tokens that collide with the reserved signs.
    pub fn parse_line(line: &str, path: &Path, lineno: usize) -> Result<Self> {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        if tokens.is_empty() {
            return Err(Error::EmptyLine {
                path: path.to_owned(),
                line: lineno,
            });
        }
        for token in &tokens {
            if token.ends_with(CONTINUATION_MARK) || token.contains(JOINER) {
                return Err(Error::ReservedToken {
                    path: path.to_owned(),
                    line: lineno,
                    token: token.clone(),
                });
            }
        }
        Ok(Sentence { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens.join(" "))
    }
}

impl From<&[&str]> for Sentence {
    fn from(tokens: &[&str]) -> Self {
        Sentence::from_tokens(tokens.iter().map(|t| t.to_string()).collect())
    }
}

/// A source/target sentence pair.
#[derive(Clone, Debug)]
pub struct ParallelPair {
    pub src: Sentence,
    pub tgt: Sentence,
}

/// Unigram and adjacent-bigram counts over a corpus.
#[derive(Clone, Debug, Default)]
pub struct CountTable {
    pub unigram: HashMap<String, u64>,
    pub bigram: HashMap<(String, String), u64>,
}

impl CountTable {
    /// Merges another table into this one. Addition is associative and
    /// commutative, so sharded counting must equal sequential counting.
    pub fn merge(&mut self, other: CountTable) {
        for (w, c) in other.unigram {
            *self.unigram.entry(w).or_insert(0) += c;
        }
        for (pair, c) in other.bigram {
            *self.bigram.entry(pair).or_insert(0) += c;
        }
    }
}

/// Loads a corpus: UTF-8, one sentence per line, tokens space-separated.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut sentences = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        sentences.push(Sentence::parse_line(&line, path, i + 1)?);
    }
    Ok(sentences)
}

/// Writes sentences back out, one per line, tokens joined by single spaces.
pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for sentence in corpus {
        writeln!(out, "{sentence}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Counts unigrams over all tokens and bigrams over all adjacent
/// within-sentence pairs. No pair crosses a sentence boundary.
pub fn count_corpus(corpus: &[Sentence]) -> Result<CountTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut table = CountTable::default();
    for sentence in corpus {
        let tokens = sentence.tokens();
        for token in tokens {
            *table.unigram.entry(token.clone()).or_insert(0) += 1;
        }
        for pair in tokens.windows(2) {
            *table
                .bigram
                .entry((pair[0].clone(), pair[1].clone()))
                .or_insert(0) += 1;
        }
    }
    Ok(table)
}

/// Length/ratio filters applied before segmentation; values default to the
/// standard cleaning thresholds (length outside 3..=250, words over 25
/// characters, length ratio outside [0.5, 2.0]).
#[derive(Clone, Copy, Debug)]
pub struct CleanConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub max_word_chars: usize,
    pub max_ratio: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            min_len: 3,
            max_len: 250,
            max_word_chars: 25,
            max_ratio: 2.0,
        }
    }
}

/// Drops pairs that fail the word-level filters. Returns retained pairs.
pub fn clean_pairs(pairs: Vec<ParallelPair>, cfg: &CleanConfig) -> Vec<ParallelPair> {
    pairs
        .into_iter()
        .filter(|pair| {
            let (s, t) = (&pair.src, &pair.tgt);
            let len_ok = |n: usize| n >= cfg.min_len && n <= cfg.max_len;
            if !len_ok(s.len()) || !len_ok(t.len()) {
                return false;
            }
            let word_ok = |sent: &Sentence| {
                sent.tokens()
                    .iter()
                    .all(|w| w.chars().count() <= cfg.max_word_chars)
            };
            if !word_ok(s) || !word_ok(t) {
                return false;
            }
            let ratio = s.len() as f64 / t.len() as f64;
            ratio <= cfg.max_ratio && ratio >= 1.0 / cfg.max_ratio
        })
        .collect()
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const NUM_SPECIALS: u32 = 4;
const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token-string to id mapping. Ids 0..=3 are pad, bos, eos, unk; regular
/// entries are contiguous from 4 in descending-frequency order with
/// lexicographic tie-breaking, so rebuilding on the same corpus reproduces
/// the same mapping.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    id_of: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn from_ordered(tokens: Vec<String>) -> Self {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + NUM_SPECIALS))
            .collect();
        Vocabulary { id_of, tokens }
    }

    /// Total size including the 4 specials.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_SPECIALS as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token, falling back to `UNK` for unseen tokens.
    pub fn id(&self, token: &str) -> u32 {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    /// Id for a token only if present.
    pub fn id_strict(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        if id < NUM_SPECIALS {
            SPECIAL_NAMES[id as usize]
        } else {
            &self.tokens[(id - NUM_SPECIALS) as usize]
        }
    }

    /// One token per line; line number plus the 4-special offset is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        for token in &self.tokens {
            writeln!(out, "{token}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                return Err(Error::Format {
                    path: path.to_owned(),
                    line: i + 1,
                    msg: "empty vocabulary entry".into(),
                });
            }
            tokens.push(line);
        }
        Ok(Vocabulary::from_ordered(tokens))
    }
}

/// Builds a vocabulary over an already-segmented corpus.
pub fn build_vocab(corpus: &[Sentence]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for sentence in corpus {
        for token in sentence.tokens() {
            *freq.entry(token).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, u64)> = freq.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_ordered(
        entries.into_iter().map(|(t, _)| t.to_owned()).collect(),
    ))
}
