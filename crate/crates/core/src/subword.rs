//! Byte-pair-encoding subwords learned jointly over several corpora.
//!
//! Sentences are split on whitespace. Each word becomes a character sequence
//! whose first symbol carries the word-boundary marker (`▁` by default), and
//! learned merges are applied in the order they were learned.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_MARKER: char = '\u{2581}';

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("cannot learn subwords from an empty corpus")]
    EmptyCorpus,
    #[error("malformed merge on line {line}: {text:?}")]
    BadMerge { line: usize, text: String },
    #[error("malformed vocab entry on line {line}: {text:?}")]
    BadVocabEntry { line: usize, text: String },
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("duplicate merge {0:?} {1:?}")]
    DuplicateMerge(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Formats a language tag token, e.g. `<2en>` or `<2de1>`.
pub fn tag_token(lang: &str) -> String {
    format!("<2{lang}>")
}

fn is_tag(token: &str) -> bool {
    token.starts_with("<2") && token.ends_with('>') && token.len() > 3
}

/// Ordered list of learned merges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    marker: char,
    ranks: HashMap<String, usize>,
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>, marker: char) -> Result<Self, SubwordError> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, (l, r)) in merges.iter().enumerate() {
            if ranks.insert(pair_key(l, r), i).is_some() {
                return Err(SubwordError::DuplicateMerge(l.clone(), r.clone()));
            }
        }
        Ok(MergeTable {
            merges,
            marker,
            ranks,
        })
    }

    pub fn empty(marker: char) -> Self {
        MergeTable::new(Vec::new(), marker).expect("no merges")
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn marker(&self) -> char {
        self.marker
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Keeps only the first `n` merges.
    pub fn truncated(&self, n: usize) -> MergeTable {
        MergeTable::new(self.merges[..n.min(self.len())].to_vec(), self.marker)
            .expect("prefix of a valid table")
    }

    /// Serializes as one `left right` merge per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn parse(text: &str, marker: char) -> Result<Self, SubwordError> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(SubwordError::BadMerge {
                        line: i + 1,
                        text: line.to_string(),
                    })
                }
            }
        }
        MergeTable::new(merges, marker)
    }

    pub fn load(path: &Path, marker: char) -> Result<Self, SubwordError> {
        Self::parse(&std::fs::read_to_string(path)?, marker)
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Splits a word into its initial symbols: marker-prefixed first character, then characters.
    pub fn initial_symbols(&self, word: &str) -> Vec<String> {
        word_symbols(word, self.marker)
    }

    /// Segments one whitespace-free word.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word, self.marker);
        let mut key = String::new();
        let mut last_rank: Option<usize> = None;
        loop {
            // Lowest-ranked merge later than the last applied one, which is
            // equivalent to sweeping the merge list once in order.
            let mut best: Option<usize> = None;
            for w in symbols.windows(2) {
                key.clear();
                key.push_str(&w[0]);
                key.push(' ');
                key.push_str(&w[1]);
                if let Some(&r) = self.ranks.get(key.as_str()) {
                    if last_rank.map_or(true, |lr| r > lr) && best.map_or(true, |b| r < b) {
                        best = Some(r);
                    }
                }
            }
            let Some(r) = best else { break };
            let (l, rt) = &self.merges[r];
            symbols = merge_symbols(&symbols, l, rt);
            last_rank = Some(r);
        }
        symbols
    }

    /// Segments a sentence into token strings.
    pub fn segment(&self, sentence: &str) -> Vec<String> {
        sentence
            .split_whitespace()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }
}

fn pair_key(l: &str, r: &str) -> String {
    format!("{l} {r}")
}

fn word_symbols(word: &str, marker: char) -> Vec<String> {
    let mut out = Vec::with_capacity(word.chars().count());
    for (i, c) in word.chars().enumerate() {
        if i == 0 {
            out.push(format!("{marker}{c}"));
        } else {
            out.push(c.to_string());
        }
    }
    out
}

fn merge_symbols(symbols: &[String], l: &str, r: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Joins token strings back into a sentence.
pub fn detokenize<S: AsRef<str>>(tokens: &[S], marker: char) -> String {
    let joined: String = tokens.iter().map(|t| t.as_ref()).collect();
    joined.replace(marker, " ").trim_start().to_string()
}

/// Word-frequency dictionary over all lines of all corpora, in sorted order.
pub fn word_counts<'a, I>(lines: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    ids: (u32, u32),
}

impl Ord for Candidate {
    // Highest count first; ties go to the lexicographically smallest (left, right).
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| Reverse((&self.left, &self.right)).cmp(&Reverse((&other.left, &other.right))))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns up to `num_merges` merges over the concatenation of `corpora`.
///
/// Each iteration merges the most frequent adjacent symbol pair, breaking ties
/// lexicographically on `(left, right)`. Learning stops early once no pair
/// occurs at least twice.
pub fn learn_bpe<S: AsRef<str>>(
    corpora: &[&[S]],
    num_merges: usize,
    marker: char,
) -> Result<MergeTable, SubwordError> {
    let counts = word_counts(corpora.iter().flat_map(|c| c.iter().map(|s| s.as_ref())));
    if counts.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }

    let mut interner: HashMap<String, u32> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    let mut intern = |s: String, names: &mut Vec<String>| -> u32 {
        if let Some(&id) = interner.get(&s) {
            return id;
        }
        let id = names.len() as u32;
        interner.insert(s.clone(), id);
        names.push(s);
        id
    };

    let mut words: Vec<(Vec<u32>, u64)> = counts
        .iter()
        .map(|(w, &c)| {
            let syms = word_symbols(w, marker)
                .into_iter()
                .map(|s| intern(s, &mut names))
                .collect();
            (syms, c)
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_insert(0) += c;
            pair_words.entry((w[0], w[1])).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&ids, &count)| Candidate {
            count,
            left: names[ids.0 as usize].clone(),
            right: names[ids.1 as usize].clone(),
            ids,
        })
        .collect();

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let Some(best) = heap.pop() else { break };
        let current = pair_counts.get(&best.ids).copied().unwrap_or(0);
        if current != best.count {
            // stale heap entry
            continue;
        }
        if best.count < 2 {
            break;
        }
        let (a, b) = best.ids;
        let merged = intern(format!("{}{}", best.left, best.right), &mut names);
        merges.push((best.left, best.right));

        let affected: Vec<usize> = pair_words
            .remove(&(a, b))
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            if !syms.windows(2).any(|w| w[0] == a && w[1] == b) {
                continue;
            }
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                if let Some(e) = pair_counts.get_mut(&p) {
                    *e -= *c;
                }
                touched.insert(p);
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_insert(0) += *c;
                pair_words.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
        }
        pair_counts.remove(&(a, b));
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match pair_counts.get(&p) {
                Some(&0) => {
                    pair_counts.remove(&p);
                }
                Some(&count) => heap.push(Candidate {
                    count,
                    left: names[p.0 as usize].clone(),
                    right: names[p.1 as usize].clone(),
                    ids: p,
                }),
                None => {}
            }
        }
    }
    MergeTable::new(merges, marker)
}

/// Learns one merge table per corpus instead of a joint one.
pub fn learn_bpe_separate<S: AsRef<str>>(
    corpora: &[&[S]],
    num_merges: usize,
    marker: char,
) -> Result<Vec<MergeTable>, SubwordError> {
    corpora
        .iter()
        .map(|c| learn_bpe(&[*c], num_merges, marker))
        .collect()
}

/// Token inventory: special tokens, language tags, then learned subwords by
/// descending corpus frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
    num_tags: usize,
}

impl Vocab {
    /// Builds a vocabulary from language tags and token counts.
    pub fn build<I>(tags: &[String], counts: I) -> Result<Self, SubwordError>
    where
        I: IntoIterator<Item = (String, u64)>,
    {
        let mut learned: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(&t.as_str()) && !tags.contains(t))
            .collect();
        learned.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; SPECIALS.len()];
        for t in tags {
            tokens.push(t.clone());
            freqs.push(0);
        }
        for (t, f) in learned {
            tokens.push(t);
            freqs.push(f);
        }
        Self::from_parts(tokens, freqs, tags.len())
    }

    /// Builds a vocabulary from the segmentations of `lines`.
    pub fn from_corpus<S: AsRef<str>>(
        tags: &[String],
        lines: &[S],
        merges: &MergeTable,
    ) -> Result<Self, SubwordError> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for t in merges.segment(line.as_ref()) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        Self::build(tags, counts)
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>, num_tags: usize) -> Result<Self, SubwordError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(SubwordError::DuplicateToken(t.clone()));
            }
        }
        Ok(Vocab {
            tokens,
            freqs,
            index,
            num_tags,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Corpus frequency of a token; zero for unknown and special tokens.
    pub fn frequency(&self, token: &str) -> u64 {
        self.id(token).map_or(0, |i| self.freqs[i as usize])
    }

    pub fn frequency_of(&self, id: u32) -> u64 {
        self.freqs.get(id as usize).copied().unwrap_or(0)
    }

    pub fn tags(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..SPECIALS.len() + self.num_tags]
    }

    pub fn is_tag_id(&self, id: u32) -> bool {
        let i = id as usize;
        i >= SPECIALS.len() && i < SPECIALS.len() + self.num_tags
    }

    /// First id after specials and tags.
    pub fn first_learned_id(&self) -> u32 {
        (SPECIALS.len() + self.num_tags) as u32
    }

    /// Learned tokens with their frequencies, in index order.
    pub fn learned(&self) -> impl Iterator<Item = (&str, u64)> {
        let start = self.first_learned_id() as usize;
        self.tokens[start..]
            .iter()
            .zip(&self.freqs[start..])
            .map(|(t, &f)| (t.as_str(), f))
    }

    /// `token<TAB>frequency` per line for tags and learned tokens; the special
    /// block is implicit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, f) in self.tokens.iter().zip(&self.freqs).skip(SPECIALS.len()) {
            let _ = writeln!(out, "{t}\t{f}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SubwordError> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; SPECIALS.len()];
        let mut num_tags = 0;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || SubwordError::BadVocabEntry {
                line: i + 1,
                text: line.to_string(),
            };
            let (t, f) = line.rsplit_once('\t').ok_or_else(bad)?;
            let f: u64 = f.parse().map_err(|_| bad())?;
            if is_tag(t) && tokens.len() == SPECIALS.len() + num_tags {
                num_tags += 1;
            }
            tokens.push(t.to_string());
            freqs.push(f);
        }
        Self::from_parts(tokens, freqs, num_tags)
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Token strings for ids, skipping pad/bos/eos.
    pub fn decode_ids(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i != PAD_ID && i != BOS_ID && i != EOS_ID)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect()
    }
}

/// A segmented sentence as vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub tokens: Vec<u32>,
    /// False when some token fell back to unk or the input contained the marker.
    pub detokenizable: bool,
}

/// Segments a sentence and maps tokens to vocabulary ids, unknown tokens to unk.
pub fn apply_bpe(sentence: &str, merges: &MergeTable, vocab: &Vocab) -> Segmentation {
    let mut detokenizable = !sentence.contains(merges.marker());
    let tokens = merges
        .segment(sentence)
        .iter()
        .map(|t| match vocab.id(t) {
            Some(id) => id,
            None => {
                detokenizable = false;
                UNK_ID
            }
        })
        .collect();
    Segmentation {
        tokens,
        detokenizable,
    }
}

/// Distinct-type counts per corpus side and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabStats {
    pub sides: Vec<(String, usize)>,
    pub total: usize,
    pub frequencies: BTreeMap<String, u64>,
}

impl VocabStats {
    /// Size of the union of the named sides' token types.
    pub fn union_of(&self, names: &[&str], types: &BTreeMap<String, BTreeSet<String>>) -> usize {
        let mut all = BTreeSet::new();
        for n in names {
            if let Some(s) = types.get(*n) {
                all.extend(s.iter().cloned());
            }
        }
        all.len()
    }
}

/// Counts distinct token types per named side and in the union of all sides,
/// plus the joint token frequency table.
pub fn vocab_stats<S: AsRef<str>>(sides: &[(&str, &[S])], merges: &MergeTable) -> VocabStats {
    let (stats, _) = vocab_stats_with_types(sides, merges);
    stats
}

/// Like [`vocab_stats`], also returning the type set of each side.
pub fn vocab_stats_with_types<S: AsRef<str>>(
    sides: &[(&str, &[S])],
    merges: &MergeTable,
) -> (VocabStats, BTreeMap<String, BTreeSet<String>>) {
    let mut frequencies: BTreeMap<String, u64> = BTreeMap::new();
    let mut types: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut per_side = Vec::new();
    for (name, lines) in sides {
        let mut set = BTreeSet::new();
        for line in lines.iter() {
            for t in merges.segment(line.as_ref()) {
                *frequencies.entry(t.clone()).or_insert(0) += 1;
                set.insert(t);
            }
        }
        per_side.push((name.to_string(), set.len()));
        types.entry(name.to_string()).or_default().extend(set);
    }
    let total = frequencies.len();
    (
        VocabStats {
            sides: per_side,
            total,
            frequencies,
        },
        types,
    )
}
