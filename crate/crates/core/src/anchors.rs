//! Mining contextual translation pairs from parallel sentences.
//!
//! A token pair `(w_s, w_t)` of a sentence pair is an anchor when each word lists the
//! other among its translations in the respective direction of the lexicon, and the
//! match is one-to-one inside the sentence pair.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::embstore::EmbeddingStore;

/// Whitespace tokenization with punctuation stripped at word boundaries.
///
/// Tokens that consist only of punctuation are dropped, so token indices count words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelSentence {
    pub pair_id: u64,
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
}

impl ParallelSentence {
    pub fn from_text(pair_id: u64, source: &str, target: &str) -> Result<Self> {
        let s = ParallelSentence {
            pair_id,
            source_tokens: tokenize(source),
            target_tokens: tokenize(target),
        };
        if s.source_tokens.is_empty() || s.target_tokens.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sentence pair {pair_id} has an empty side"
            )));
        }
        Ok(s)
    }

    fn swapped(&self) -> Self {
        ParallelSentence {
            pair_id: self.pair_id,
            source_tokens: self.target_tokens.clone(),
            target_tokens: self.source_tokens.clone(),
        }
    }
}

/// Directed translation lists. Lookups try the exact form first, then the lowercase form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BilingualLexicon {
    fwd: HashMap<String, HashSet<String>>,
    bwd: HashMap<String, HashSet<String>>,
}

fn forms(word: &str) -> impl Iterator<Item = std::borrow::Cow<'_, str>> {
    let lower = word.to_lowercase();
    let extra = (lower != word).then_some(lower);
    std::iter::once(std::borrow::Cow::Borrowed(word)).chain(extra.map(std::borrow::Cow::Owned))
}

fn lookup(map: &HashMap<String, HashSet<String>>, from: &str, to: &str) -> bool {
    forms(from).any(|k| {
        map.get(k.as_ref())
            .is_some_and(|set| forms(to).any(|t| set.contains(t.as_ref())))
    })
}

impl BilingualLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// A lexicon whose backward list is the transpose of the forward list.
    pub fn symmetric<I, S, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut lex = Self::new();
        for (s, t) in pairs {
            let (s, t) = (s.into(), t.into());
            lex.add_forward(s.clone(), t.clone());
            lex.add_backward(t, s);
        }
        lex
    }

    pub fn add_forward(&mut self, source: impl Into<String>, target: impl Into<String>) {
        self.fwd
            .entry(source.into())
            .or_default()
            .insert(target.into());
    }

    pub fn add_backward(&mut self, target: impl Into<String>, source: impl Into<String>) {
        self.bwd
            .entry(target.into())
            .or_default()
            .insert(source.into());
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty() && self.bwd.is_empty()
    }

    /// `target ∈ TranslationOf(source)` in the source→target list.
    pub fn forward_contains(&self, source: &str, target: &str) -> bool {
        lookup(&self.fwd, source, target)
    }

    /// `source ∈ TranslationOf(target)` in the target→source list.
    pub fn backward_contains(&self, target: &str, source: &str) -> bool {
        lookup(&self.bwd, target, source)
    }

    pub fn mutual(&self, source: &str, target: &str) -> bool {
        self.forward_contains(source, target) && self.backward_contains(target, source)
    }

    /// Swaps the roles of the two languages.
    pub fn transposed(&self) -> Self {
        BilingualLexicon {
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
        }
    }

    /// Reads `source_word \t target_word` lines into the forward list.
    pub fn read_forward_tsv(&mut self, path: impl AsRef<Path>) -> Result<()> {
        for (s, t) in read_word_pairs(path.as_ref())? {
            self.add_forward(s, t);
        }
        Ok(())
    }

    /// Reads `target_word \t source_word` lines into the backward list.
    pub fn read_backward_tsv(&mut self, path: impl AsRef<Path>) -> Result<()> {
        for (t, s) in read_word_pairs(path.as_ref())? {
            self.add_backward(t, s);
        }
        Ok(())
    }

    /// Single `source_word \t target_word` file used for both directions.
    pub fn read_symmetric_tsv(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::symmetric(read_word_pairs(path.as_ref())?))
    }
}

fn read_word_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next()) {
            (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                out.push((a.trim().to_string(), b.trim().to_string()))
            }
            _ => {
                return Err(Error::MalformedInput {
                    line: n + 1,
                    message: "expected `word \\t word`".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Reads `pair_id \t source \t target` lines.
pub fn read_parallel_tsv(path: impl AsRef<Path>) -> Result<Vec<ParallelSentence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedInput {
            line: n + 1,
            message,
        };
        let cols: Vec<&str> = line.splitn(3, '\t').collect();
        if cols.len() != 3 {
            return Err(malformed("expected `pair_id \\t source \\t target`".into()));
        }
        let pair_id = cols[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| malformed(format!("bad pair id: {e}")))?;
        out.push(ParallelSentence::from_text(pair_id, cols[1], cols[2]).map_err(|e| malformed(e.to_string()))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// A mined anchor: token positions inside one sentence pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Anchor {
    pub pair_id: u64,
    pub src_index: u32,
    pub tgt_index: u32,
}

fn mine_pair(sentence: &ParallelSentence, lexicon: &BilingualLexicon) -> Vec<Anchor> {
    let src = &sentence.source_tokens;
    let tgt = &sentence.target_tokens;
    let type_counts = |tokens: &[String]| {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t.to_lowercase()).or_default() += 1;
        }
        counts
    };
    let src_types = type_counts(src);
    let tgt_types = type_counts(tgt);

    let matches: Vec<Vec<bool>> = src
        .iter()
        .map(|ws| tgt.iter().map(|wt| lexicon.mutual(ws, wt)).collect())
        .collect();
    let row_hits: Vec<usize> = matches
        .iter()
        .map(|row| row.iter().filter(|&&m| m).count())
        .collect();
    let col_hits: Vec<usize> = (0..tgt.len())
        .map(|j| matches.iter().filter(|row| row[j]).count())
        .collect();

    let mut out = Vec::new();
    for (i, row) in matches.iter().enumerate() {
        if row_hits[i] != 1 || src_types[&src[i].to_lowercase()] != 1 {
            continue;
        }
        let j = row.iter().position(|&m| m).unwrap();
        if col_hits[j] != 1 || tgt_types[&tgt[j].to_lowercase()] != 1 {
            continue;
        }
        out.push(Anchor {
            pair_id: sentence.pair_id,
            src_index: i as u32,
            tgt_index: j as u32,
        });
    }
    out
}

/// Mutual-translation anchors over all sentence pairs, in input order.
pub fn mine_anchors(sentences: &[ParallelSentence], lexicon: &BilingualLexicon) -> Vec<Anchor> {
    if lexicon.is_empty() {
        return Vec::new();
    }
    sentences
        .par_iter()
        .map(|s| mine_pair(s, lexicon))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Mining with the languages' roles exchanged; used to check role symmetry.
pub fn mine_anchors_reversed(
    sentences: &[ParallelSentence],
    lexicon: &BilingualLexicon,
) -> Vec<Anchor> {
    let swapped: Vec<ParallelSentence> = sentences.iter().map(ParallelSentence::swapped).collect();
    mine_anchors(&swapped, &lexicon.transposed())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub split: Vec<Split>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<Anchor>, split: Split) -> Self {
        let n = anchors.len();
        AnchorSet {
            anchors,
            split: vec![split; n],
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn with_split(&self, split: Split) -> AnchorSet {
        let anchors = self
            .anchors
            .iter()
            .zip(&self.split)
            .filter(|(_, &s)| s == split)
            .map(|(a, _)| *a)
            .collect();
        AnchorSet::new(anchors, split)
    }

    pub fn merged(train: &AnchorSet, test: &AnchorSet) -> AnchorSet {
        AnchorSet {
            anchors: train.anchors.iter().chain(&test.anchors).copied().collect(),
            split: train.split.iter().chain(&test.split).copied().collect(),
        }
    }

    /// No source or target token may be used twice within one split.
    pub fn validate(&self) -> Result<()> {
        if self.anchors.len() != self.split.len() {
            return Err(Error::lengths(
                self.anchors.len(),
                self.split.len(),
                "anchors vs split tags",
            ));
        }
        let mut src_seen = HashSet::new();
        let mut tgt_seen = HashSet::new();
        for (a, s) in self.anchors.iter().zip(&self.split) {
            if !src_seen.insert((*s, a.pair_id, a.src_index))
                || !tgt_seen.insert((*s, a.pair_id, a.tgt_index))
            {
                return Err(Error::InvalidArgument(format!(
                    "duplicate anchor token in pair {} ({s})",
                    a.pair_id
                )));
            }
        }
        Ok(())
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for (a, s) in self.anchors.iter().zip(&self.split) {
            writeln!(out, "{}\t{}\t{}\t{}", a.pair_id, a.src_index, a.tgt_index, s)
                .expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<AnchorSet> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut set = AnchorSet::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| Error::MalformedInput {
                line: n + 1,
                message,
            };
            let cols: Vec<&str> = line.trim_end().split('\t').collect();
            if cols.len() != 4 {
                return Err(malformed(
                    "expected `pair_id \\t src_idx \\t tgt_idx \\t split`".into(),
                ));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| malformed(e.to_string()));
            set.anchors.push(Anchor {
                pair_id: num(cols[0])?,
                src_index: num(cols[1])? as u32,
                tgt_index: num(cols[2])? as u32,
            });
            set.split
                .push(cols[3].parse().map_err(|e: Error| malformed(e.to_string()))?);
        }
        Ok(set)
    }
}

/// Test size is `ceil(n · test_fraction)`, capped so that the test:train ratio of a full
/// training set is preserved (20,000 train at 0.2 caps test at 5,000). Training takes the
/// rest, up to `train_cap`.
pub fn split_anchors(
    anchors: &[Anchor],
    train_cap: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(AnchorSet, AnchorSet)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = anchors.len();
    if n < 2 {
        return Err(Error::InsufficientAnchors(n));
    }
    // Small epsilon keeps 20000·0.2/0.8 from rounding up to 5001.
    let test_cap = (train_cap as f64 * test_fraction / (1.0 - test_fraction) - 1e-9).ceil();
    let test_n = ((n as f64 * test_fraction - 1e-9).ceil().min(test_cap.max(1.0)) as usize)
        .clamp(1, n - 1);
    let train_n = (n - test_n).min(train_cap);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_idx = order[..test_n].to_vec();
    let mut train_idx = order[test_n..test_n + train_n].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize], split| AnchorSet::new(idx.iter().map(|&i| anchors[i]).collect(), split);
    Ok((pick(&train_idx, Split::Train), pick(&test_idx, Split::Test)))
}

/// Anchors resolved to store positions: row `i` pairs `target[i]` with `source[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResolvedAnchors {
    pub target_positions: Vec<usize>,
    pub source_positions: Vec<usize>,
    pub target_record_ids: Vec<u64>,
    pub source_record_ids: Vec<u64>,
    /// Anchors whose token was missing from either store (e.g. truncated sentences).
    pub dropped: usize,
}

impl ResolvedAnchors {
    pub fn len(&self) -> usize {
        self.target_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_positions.is_empty()
    }
}

/// Looks up anchor tokens by `(sentence_id = pair_id, token_index)` in both stores.
pub fn resolve_anchors(
    anchors: &AnchorSet,
    source: &EmbeddingStore,
    target: &EmbeddingStore,
) -> ResolvedAnchors {
    let src_pos = source.token_positions();
    let tgt_pos = target.token_positions();
    let mut out = ResolvedAnchors::default();
    for a in &anchors.anchors {
        match (
            src_pos.get(&(a.pair_id, a.src_index)),
            tgt_pos.get(&(a.pair_id, a.tgt_index)),
        ) {
            (Some(&s), Some(&t)) => {
                out.source_positions.push(s);
                out.target_positions.push(t);
                out.source_record_ids.push(source.records()[s].record_id);
                out.target_record_ids.push(target.records()[t].record_id);
            }
            _ => out.dropped += 1,
        }
    }
    if out.dropped > 0 {
        log::warn!("{} anchors could not be resolved in the stores", out.dropped);
    }
    out
}
