//! End-to-end helpers shared by the command line tool and experiments:
//! encipher, learn joint subwords, build the vocabulary, encode, translate.

use thiserror::Error;

use crate::cipher::{encipher_corpus, Alphabet, CipherError, CipherKey, CipherSpec};
use crate::corpus::{AugmentedDataset, CorpusError, EncodedCorpus, ParallelCorpus};
use crate::exec::Execution;
use crate::model::{beam_search, ModelError, Scalar, Transformer};
use crate::subword::{apply_bpe, detokenize, learn_bpe, tag_token, MergeTable, SubwordError, Vocab, DEFAULT_MARKER};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Subwords, vocabulary and encoded splits for one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub merges: MergeTable,
    pub vocab: Vocab,
    pub ciphered: Vec<AugmentedDataset>,
    pub train: EncodedCorpus,
    /// Anchor sources and targets only.
    pub dev: EncodedCorpus,
}

/// Enciphers the training sources with `keys`, learns `num_merges` joint BPE
/// merges over plain sources, every cipher view and targets, and encodes both
/// splits. The vocabulary registers tags for both languages.
pub fn prepare(
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    alphabet: &Alphabet,
    keys: &[CipherKey],
    num_merges: usize,
    exec: Execution,
) -> Result<Prepared, PipelineError> {
    let spec = CipherSpec::new(alphabet.clone(), keys.to_vec())?;
    let ciphered = encipher_corpus(train, &spec, exec)?;
    let mut lines: Vec<&str> = train.sources();
    for ds in &ciphered {
        lines.extend(ds.sources());
    }
    lines.extend(train.targets());
    let merges = learn_bpe(&[&lines[..]], num_merges, DEFAULT_MARKER)?;
    let tags = vec![tag_token(&train.tgt_lang), tag_token(&train.src_lang)];
    let vocab = Vocab::from_corpus(&tags, &lines, &merges)?;
    let train_enc = EncodedCorpus::encode(train, &ciphered, &merges, &vocab)?;
    let dev_enc = EncodedCorpus::encode(dev, &[], &merges, &vocab)?;
    Ok(Prepared {
        merges,
        vocab,
        ciphered,
        train: train_enc,
        dev: dev_enc,
    })
}

/// Beam-search translation of raw sentences; outputs are detokenized.
#[allow(clippy::too_many_arguments)]
pub fn translate_sentences<F: Scalar>(
    model: &Transformer<F>,
    merges: &MergeTable,
    vocab: &Vocab,
    sources: &[&str],
    prefix: Option<u32>,
    beam: usize,
    len_penalty: f64,
    exec: Execution,
) -> Result<Vec<String>, PipelineError> {
    let limit = model.config.max_len.saturating_sub(1);
    let out = exec.map(sources, |s| {
        let ids: Vec<u32> = prefix
            .into_iter()
            .chain(apply_bpe(s, merges, vocab).tokens)
            .take(model.config.max_len)
            .collect();
        let max_len = (2 * ids.len() + 10).min(limit);
        beam_search(model, &ids, beam, len_penalty, max_len)
            .map(|h| detokenize(&vocab.decode_ids(&h.tokens), merges.marker()))
    });
    Ok(out.into_iter().collect::<Result<_, _>>()?)
}
