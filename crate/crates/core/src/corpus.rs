//! Parallel corpora and the two training-set constructions built on them:
//! tagged multi-source examples and anchored plaintext/ciphertext batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cipher::CipherKey;
use crate::subword::{apply_bpe, tag_token, MergeTable, Vocab};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("source has {src} lines but target has {tgt}")]
    LengthMismatch { src: usize, tgt: usize },
    #[error("empty sentence at pair {0}")]
    EmptyLine(usize),
    #[error("dataset for key {key} has {got} pairs, anchor corpus has {want}")]
    Misaligned { key: CipherKey, got: usize, want: usize },
    #[error("target of pair {index} differs between anchor and key {key}")]
    TargetMismatch { key: CipherKey, index: usize },
    #[error("language tag {0} is not registered in the vocabulary")]
    UnregisteredTag(String),
    #[error("example {index} needs {need} tokens but the batch budget is {budget}")]
    BudgetTooSmall { index: usize, need: usize, budget: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Reads a UTF-8 file with one sentence per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect())
}

/// Aligned sentence pairs `(x_i, y_i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pairs: Vec<(String, String)>,
}

impl ParallelCorpus {
    /// Fails if any side of any pair is blank.
    pub fn new(
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
        pairs: Vec<(String, String)>,
    ) -> Result<Self, CorpusError> {
        if let Some(i) = pairs
            .iter()
            .position(|(s, t)| s.trim().is_empty() || t.trim().is_empty())
        {
            return Err(CorpusError::EmptyLine(i));
        }
        Ok(ParallelCorpus {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            pairs,
        })
    }

    /// Zips line lists, dropping pairs where either side is blank.
    pub fn from_lines(
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
        src: Vec<String>,
        tgt: Vec<String>,
    ) -> Result<Self, CorpusError> {
        if src.len() != tgt.len() {
            return Err(CorpusError::LengthMismatch {
                src: src.len(),
                tgt: tgt.len(),
            });
        }
        let pairs = src
            .into_iter()
            .zip(tgt)
            .filter(|(s, t)| !s.trim().is_empty() && !t.trim().is_empty())
            .collect();
        Self::new(src_lang, tgt_lang, pairs)
    }

    pub fn load(
        src_lang: &str,
        tgt_lang: &str,
        src: &Path,
        tgt: &Path,
    ) -> Result<Self, CorpusError> {
        Self::from_lines(src_lang, tgt_lang, read_lines(src)?, read_lines(tgt)?)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<&str> {
        self.pairs.iter().map(|(s, _)| s.as_str()).collect()
    }

    pub fn targets(&self) -> Vec<&str> {
        self.pairs.iter().map(|(_, t)| t.as_str()).collect()
    }
}

/// An enciphered copy of a corpus for one key, aligned index-for-index with
/// the anchor corpus and sharing its targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedDataset {
    pub key: CipherKey,
    /// Name of the cipher "language", e.g. `de1` for ROT-1 German.
    pub lang: String,
    pairs: Vec<(String, String)>,
}

impl AugmentedDataset {
    pub fn new(key: CipherKey, lang: String, pairs: Vec<(String, String)>) -> Self {
        AugmentedDataset { key, lang, pairs }
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<&str> {
        self.pairs.iter().map(|(s, _)| s.as_str()).collect()
    }
}

/// Checks that every augmented dataset is aligned with the anchor corpus.
pub fn check_alignment(
    corpus: &ParallelCorpus,
    ciphered: &[AugmentedDataset],
) -> Result<(), CorpusError> {
    for ds in ciphered {
        if ds.len() != corpus.len() {
            return Err(CorpusError::Misaligned {
                key: ds.key,
                got: ds.len(),
                want: corpus.len(),
            });
        }
        if let Some(index) = ds
            .pairs()
            .iter()
            .zip(corpus.pairs())
            .position(|(a, b)| a.1 != b.1)
        {
            return Err(CorpusError::TargetMismatch { key: ds.key, index });
        }
    }
    Ok(())
}

/// One direction of the tagged multi-source union, as text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedLine {
    /// Language the example translates into.
    pub target_lang: String,
    /// Language (or cipher language) of the source.
    pub source_lang: String,
    pub source: String,
    pub target: String,
}

impl TaggedLine {
    /// Source line with its tag token prepended.
    pub fn tagged_source(&self) -> String {
        format!("{} {}", tag_token(&self.target_lang), self.source)
    }
}

/// Expands a corpus into the tagged multi-source union. Per pair: `src→tgt`,
/// `ROT-k(src)→tgt` for each key and, with `pivot`, `ROT-k(src)→src` for each key.
pub fn build_naive_lines(
    corpus: &ParallelCorpus,
    ciphered: &[AugmentedDataset],
    pivot: bool,
) -> Result<Vec<TaggedLine>, CorpusError> {
    check_alignment(corpus, ciphered)?;
    let per_pair = 1 + ciphered.len() * if pivot { 2 } else { 1 };
    let mut out = Vec::with_capacity(corpus.len() * per_pair);
    for (i, (src, tgt)) in corpus.pairs().iter().enumerate() {
        out.push(TaggedLine {
            target_lang: corpus.tgt_lang.clone(),
            source_lang: corpus.src_lang.clone(),
            source: src.clone(),
            target: tgt.clone(),
        });
        for ds in ciphered {
            out.push(TaggedLine {
                target_lang: corpus.tgt_lang.clone(),
                source_lang: ds.lang.clone(),
                source: ds.pairs()[i].0.clone(),
                target: tgt.clone(),
            });
        }
        if pivot {
            for ds in ciphered {
                out.push(TaggedLine {
                    target_lang: corpus.src_lang.clone(),
                    source_lang: ds.lang.clone(),
                    source: ds.pairs()[i].0.clone(),
                    target: src.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// A cipher view of the encoded anchor sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherView {
    pub key: CipherKey,
    pub lang: String,
    pub sources: Vec<Vec<u32>>,
}

/// Token ids for an anchor corpus and its cipher views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub anchors: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub views: Vec<CipherView>,
}

impl EncodedCorpus {
    pub fn encode(
        corpus: &ParallelCorpus,
        ciphered: &[AugmentedDataset],
        merges: &MergeTable,
        vocab: &Vocab,
    ) -> Result<Self, CorpusError> {
        check_alignment(corpus, ciphered)?;
        let enc = |s: &str| apply_bpe(s, merges, vocab).tokens;
        Ok(EncodedCorpus {
            src_lang: corpus.src_lang.clone(),
            tgt_lang: corpus.tgt_lang.clone(),
            anchors: corpus.pairs().iter().map(|(s, _)| enc(s)).collect(),
            targets: corpus.pairs().iter().map(|(_, t)| enc(t)).collect(),
            views: ciphered
                .iter()
                .map(|ds| CipherView {
                    key: ds.key,
                    lang: ds.lang.clone(),
                    sources: ds.pairs().iter().map(|(s, _)| enc(s)).collect(),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Keeps only the first `n` cipher views.
    pub fn with_views(&self, n: usize) -> EncodedCorpus {
        let mut c = self.clone();
        c.views.truncate(n);
        c
    }
}

/// A source sequence whose first token is a target-language tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedExample {
    pub direction_tag: u32,
    /// Source ids, starting with `direction_tag`.
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// Corpus index the example came from.
    pub index: usize,
}

/// Tagged examples over encoded data; the same direction layout as [`build_naive_lines`].
pub fn build_naive_dataset(
    corpus: &EncodedCorpus,
    vocab: &Vocab,
    pivot: bool,
) -> Result<Vec<TaggedExample>, CorpusError> {
    let tag = |lang: &str| {
        let t = tag_token(lang);
        vocab
            .id(&t)
            .filter(|&id| vocab.is_tag_id(id))
            .ok_or(CorpusError::UnregisteredTag(t))
    };
    let to_tgt = tag(&corpus.tgt_lang)?;
    let to_src = if pivot && !corpus.views.is_empty() {
        Some(tag(&corpus.src_lang)?)
    } else {
        None
    };
    for v in &corpus.views {
        if v.sources.len() != corpus.len() {
            return Err(CorpusError::Misaligned {
                key: v.key,
                got: v.sources.len(),
                want: corpus.len(),
            });
        }
    }
    let tagged = |tag: u32, src: &[u32]| {
        let mut s = Vec::with_capacity(src.len() + 1);
        s.push(tag);
        s.extend_from_slice(src);
        s
    };
    let mut out = Vec::new();
    for i in 0..corpus.len() {
        out.push(TaggedExample {
            direction_tag: to_tgt,
            source: tagged(to_tgt, &corpus.anchors[i]),
            target: corpus.targets[i].clone(),
            index: i,
        });
        for v in &corpus.views {
            out.push(TaggedExample {
                direction_tag: to_tgt,
                source: tagged(to_tgt, &v.sources[i]),
                target: corpus.targets[i].clone(),
                index: i,
            });
        }
        if let Some(to_src) = to_src {
            for v in &corpus.views {
                out.push(TaggedExample {
                    direction_tag: to_src,
                    source: tagged(to_src, &v.sources[i]),
                    target: corpus.anchors[i].clone(),
                    index: i,
                });
            }
        }
    }
    Ok(out)
}

/// How cipher views are assigned to optimization steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeySchedule {
    /// One key per batch, cycling through keys across steps.
    #[default]
    RoundRobin,
    /// Every key's view in every batch.
    AllKeys,
}

/// One sentence seen through the anchor and zero or more cipher views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredExample {
    pub index: usize,
    pub anchor: Vec<u32>,
    /// Aligned with [`AnchoredBatch::keys`].
    pub ciphers: Vec<Vec<u32>>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredBatch {
    pub keys: Vec<CipherKey>,
    pub examples: Vec<AnchoredExample>,
}

impl AnchoredBatch {
    /// Number of target tokens including the end-of-sentence token.
    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.target.len() + 1).sum()
    }
}

fn epoch_rng(seed: u64, epoch: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(1 << 16).wrapping_add(slot));
    rng
}

/// Shuffles, sorts by target length and packs items into batches whose summed
/// cost stays within `budget`; batch order is shuffled again.
fn pack(
    costs: &[usize],
    target_lens: &[usize],
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, CorpusError> {
    if let Some(index) = costs.iter().position(|&c| c > budget) {
        return Err(CorpusError::BudgetTooSmall {
            index,
            need: costs[index],
            budget,
        });
    }
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| target_lens[i]);
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        if used + costs[i] > budget && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        used += costs[i];
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Builds one epoch of anchored batches.
///
/// With [`KeySchedule::RoundRobin`] each batch carries a single key's view and
/// batches of different keys alternate, so an epoch visits every
/// `(index, key)` pair exactly once. With no views each batch is anchor-only.
/// The cost of an example is the longest of its source views and its target.
pub fn build_anchored_batches(
    corpus: &EncodedCorpus,
    batch_tokens: usize,
    seed: u64,
    epoch: u64,
    schedule: KeySchedule,
) -> Result<Vec<AnchoredBatch>, CorpusError> {
    let n = corpus.len();
    let target_lens: Vec<usize> = corpus.targets.iter().map(|t| t.len() + 1).collect();
    let cost = |i: usize, views: &[usize]| {
        let src = views
            .iter()
            .map(|&v| corpus.views[v].sources[i].len())
            .chain(std::iter::once(corpus.anchors[i].len()))
            .max()
            .unwrap_or(0);
        src.max(target_lens[i])
    };
    let slots: Vec<Vec<usize>> = if corpus.views.is_empty() {
        vec![vec![]]
    } else {
        match schedule {
            KeySchedule::RoundRobin => (0..corpus.views.len()).map(|v| vec![v]).collect(),
            KeySchedule::AllKeys => vec![(0..corpus.views.len()).collect()],
        }
    };
    let mut per_slot = Vec::with_capacity(slots.len());
    for (s, views) in slots.iter().enumerate() {
        let costs: Vec<usize> = (0..n).map(|i| cost(i, views)).collect();
        let mut rng = epoch_rng(seed, epoch, s as u64);
        per_slot.push(pack(&costs, &target_lens, batch_tokens, &mut rng)?);
    }
    let rounds = per_slot.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for (s, views) in slots.iter().enumerate() {
            let Some(idx) = per_slot[s].get(r) else { continue };
            out.push(AnchoredBatch {
                keys: views.iter().map(|&v| corpus.views[v].key).collect(),
                examples: idx
                    .iter()
                    .map(|&i| AnchoredExample {
                        index: i,
                        anchor: corpus.anchors[i].clone(),
                        ciphers: views
                            .iter()
                            .map(|&v| corpus.views[v].sources[i].clone())
                            .collect(),
                        target: corpus.targets[i].clone(),
                    })
                    .collect(),
            });
        }
    }
    Ok(out)
}

/// Batches of tagged examples (indices into `examples`) for one epoch.
pub fn build_tagged_batches(
    examples: &[TaggedExample],
    batch_tokens: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, CorpusError> {
    let target_lens: Vec<usize> = examples.iter().map(|e| e.target.len() + 1).collect();
    let costs: Vec<usize> = examples
        .iter()
        .zip(&target_lens)
        .map(|(e, &t)| e.source.len().max(t))
        .collect();
    let mut rng = epoch_rng(seed, epoch, 0);
    pack(&costs, &target_lens, batch_tokens, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cipher::{encipher_corpus, Alphabet, CipherSpec};
    use crate::exec::Execution;
    use crate::subword::{detokenize, learn_bpe, DEFAULT_MARKER};
    use std::collections::BTreeMap;

    fn toy(n: usize, keys: &[u32]) -> (ParallelCorpus, Vec<AugmentedDataset>) {
        let words = ["wir", "alle", "lieben", "baseball", "oder", "hey", "warum", "nicht"];
        let pairs = (0..n)
            .map(|i| {
                let len = 2 + i % 4;
                let s: Vec<&str> = (0..len).map(|j| words[(i * 3 + j) % words.len()]).collect();
                (s.join(" "), format!("t{} x{}", i % 7, i % 3))
            })
            .collect();
        let corpus = ParallelCorpus::new("de", "en", pairs).unwrap();
        let spec = CipherSpec::new(
            Alphabet::german(),
            keys.iter().map(|&k| CipherKey(k)).collect(),
        )
        .unwrap();
        let ciphered = encipher_corpus(&corpus, &spec, Execution::Sequential).unwrap();
        (corpus, ciphered)
    }

    fn encoded(n: usize, keys: &[u32]) -> (EncodedCorpus, Vocab, MergeTable) {
        let (corpus, ciphered) = toy(n, keys);
        let mut lines: Vec<String> = corpus.pairs().iter().map(|p| p.0.clone()).collect();
        lines.extend(corpus.pairs().iter().map(|p| p.1.clone()));
        for ds in &ciphered {
            lines.extend(ds.pairs().iter().map(|p| p.0.clone()));
        }
        let merges = learn_bpe(&[&lines[..]], 30, DEFAULT_MARKER).unwrap();
        let mut tags = vec![tag_token("en"), tag_token("de")];
        tags.extend(ciphered.iter().map(|d| tag_token(&d.lang)));
        let vocab = Vocab::from_corpus(&tags, &lines, &merges).unwrap();
        let enc = EncodedCorpus::encode(&corpus, &ciphered, &merges, &vocab).unwrap();
        (enc, vocab, merges)
    }

    #[test]
    fn naive_counts() {
        for n in [1, 3, 10] {
            for keys in [&[][..], &[1][..], &[1, 2][..]] {
                let (corpus, ciphered) = toy(n, keys);
                let k = keys.len();
                assert_eq!(build_naive_lines(&corpus, &ciphered, false).unwrap().len(), (k + 1) * n);
                assert_eq!(build_naive_lines(&corpus, &ciphered, true).unwrap().len(), (2 * k + 1) * n);
            }
        }
        let (corpus, ciphered) = toy(3, &[]);
        let lines = build_naive_lines(&corpus, &ciphered, false).unwrap();
        assert!(lines.iter().all(|l| l.target_lang == "en"));
        assert!(lines[0].tagged_source().starts_with("<2en> "));
    }

    #[test]
    fn pivot_directions_enumerated() {
        let (corpus, ciphered) = toy(3, &[1, 2]);
        let lines = build_naive_lines(&corpus, &ciphered, true).unwrap();
        let dirs: Vec<(String, String)> = lines[..5]
            .iter()
            .map(|l| (l.source_lang.clone(), l.target_lang.clone()))
            .collect();
        let want = [("de", "en"), ("de1", "en"), ("de2", "en"), ("de1", "de"), ("de2", "de")];
        for (d, w) in dirs.iter().zip(want) {
            assert_eq!((d.0.as_str(), d.1.as_str()), w);
        }
        assert_eq!(lines[3].target, corpus.pairs()[0].0);
    }

    #[test]
    fn misaligned_datasets_rejected() {
        let (corpus, mut ciphered) = toy(3, &[1]);
        let short = AugmentedDataset::new(CipherKey(1), "de1".into(), ciphered[0].pairs()[..2].to_vec());
        assert!(matches!(
            build_naive_lines(&corpus, &[short], false),
            Err(CorpusError::Misaligned { .. })
        ));
        let mut pairs = ciphered[0].pairs().to_vec();
        pairs[1].1 = "changed".into();
        ciphered[0] = AugmentedDataset::new(CipherKey(1), "de1".into(), pairs);
        assert!(matches!(
            check_alignment(&corpus, &ciphered),
            Err(CorpusError::TargetMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn tagged_examples_start_with_registered_tag() {
        let (enc, vocab, _) = encoded(4, &[1, 2]);
        let ex = build_naive_dataset(&enc, &vocab, true).unwrap();
        assert_eq!(ex.len(), 5 * 4);
        for e in &ex {
            assert_eq!(e.source[0], e.direction_tag);
            assert!(vocab.is_tag_id(e.direction_tag));
        }
        let bare = Vocab::build(&[], vec![("x".to_string(), 1)]).unwrap();
        assert!(matches!(
            build_naive_dataset(&enc, &bare, false),
            Err(CorpusError::UnregisteredTag(_))
        ));
    }

    #[test]
    fn epoch_covers_every_index_key_pair_once() {
        let (enc, _, _) = encoded(5, &[1, 2]);
        let batches = build_anchored_batches(&enc, 40, 7, 0, KeySchedule::RoundRobin).unwrap();
        let mut visits: BTreeMap<(usize, u32), usize> = BTreeMap::new();
        for b in &batches {
            assert_eq!(b.keys.len(), 1);
            for e in &b.examples {
                *visits.entry((e.index, b.keys[0].0)).or_insert(0) += 1;
            }
        }
        assert_eq!(visits.len(), 10);
        assert!(visits.values().all(|&v| v == 1));
        // keys alternate while both have batches left
        assert_ne!(batches[0].keys, batches[1].keys);
    }

    #[test]
    fn batches_keep_views_aligned() {
        let (enc, vocab, _) = encoded(6, &[1, 2]);
        let de = Alphabet::german();
        for b in build_anchored_batches(&enc, 30, 3, 1, KeySchedule::RoundRobin).unwrap() {
            for e in &b.examples {
                assert_eq!(e.target, enc.targets[e.index]);
                let plain = detokenize(&vocab.decode_ids(&e.anchor), DEFAULT_MARKER);
                let cipher = detokenize(&vocab.decode_ids(&e.ciphers[0]), DEFAULT_MARKER);
                assert_eq!(cipher, crate::cipher::encipher_text(&plain, b.keys[0], &de));
            }
        }
        let all = build_anchored_batches(&enc, 1000, 3, 0, KeySchedule::AllKeys).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].examples[0].ciphers.len(), 2);
    }

    #[test]
    fn single_pair_single_key() {
        let (enc, _, _) = encoded(1, &[1]);
        let b = build_anchored_batches(&enc, 1000, 0, 0, KeySchedule::RoundRobin).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].examples[0].anchor, enc.anchors[0]);
        assert_eq!(b[0].examples[0].ciphers[0], enc.views[0].sources[0]);
    }

    #[test]
    fn budget_and_determinism() {
        let (enc, _, _) = encoded(8, &[1]);
        assert!(matches!(
            build_anchored_batches(&enc, 2, 0, 0, KeySchedule::RoundRobin),
            Err(CorpusError::BudgetTooSmall { .. })
        ));
        let a = build_anchored_batches(&enc, 20, 5, 2, KeySchedule::RoundRobin).unwrap();
        let b = build_anchored_batches(&enc, 20, 5, 2, KeySchedule::RoundRobin).unwrap();
        assert_eq!(a, b);
        for batch in &a {
            let used: usize = batch
                .examples
                .iter()
                .map(|e| e.anchor.len().max(e.ciphers[0].len()).max(e.target.len() + 1))
                .sum();
            assert!(used <= 20);
        }
        let none = enc.with_views(0);
        let anchor_only = build_anchored_batches(&none, 20, 5, 2, KeySchedule::RoundRobin).unwrap();
        assert_eq!(anchor_only.iter().map(|b| b.examples.len()).sum::<usize>(), 8);
        assert!(anchor_only.iter().all(|b| b.keys.is_empty()));
    }
}
