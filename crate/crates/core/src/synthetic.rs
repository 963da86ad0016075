//! A synthetic translation task for desk-scale experiments.
//!
//! Source sentences follow subject-object-verb order with adjectives before
//! nouns; targets use subject-verb-object order with adjectives after nouns.
//! Words are drawn from a fixed random lexicon with Zipfian frequencies, so the
//! task has a long tail of rare words like real parallel data.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::cipher::{Alphabet, CipherKey, ENGLISH_LETTERS, GERMAN_LETTERS};
use crate::corpus::ParallelCorpus;
use crate::eval::{corpus_bleu, Smoothing};
use crate::exec::Execution;
use crate::losses::LossConfig;
use crate::model::{ModelConfig, Transformer};
use crate::pipeline::{prepare, translate_sentences, PipelineError};
use crate::trainer::{source_prefix, train, LogRecord, TrainConfig, TrainData, TrainError, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskConfig {
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub nouns: usize,
    pub adjectives: usize,
    pub verbs: usize,
    pub adjective_prob: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            train_pairs: 2000,
            dev_pairs: 200,
            test_pairs: 200,
            nouns: 150,
            adjectives: 40,
            verbs: 40,
            adjective_prob: 0.4,
            zipf_exponent: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub nouns: Vec<(String, String)>,
    pub adjectives: Vec<(String, String)>,
    pub verbs: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub lexicon: Lexicon,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

fn word(rng: &mut ChaCha8Rng, letters: &[char], common: usize) -> String {
    let len = rng.random_range(2..=7);
    (0..len)
        .map(|_| {
            // the first `common` letters are the plain a-z range
            if rng.random::<f64>() < 0.97 {
                letters[rng.random_range(0..common)]
            } else {
                letters[rng.random_range(0..letters.len())]
            }
        })
        .collect()
}

fn lexicon(cfg: &ToyTaskConfig, rng: &mut ChaCha8Rng) -> Lexicon {
    let de: Vec<char> = GERMAN_LETTERS.chars().collect();
    let en: Vec<char> = ENGLISH_LETTERS.chars().collect();
    let mut seen_src = BTreeSet::new();
    let mut seen_tgt = BTreeSet::new();
    let mut draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = word(rng, &de, 26);
            let t = word(rng, &en, 26);
            if seen_src.contains(&s) || seen_tgt.contains(&t) {
                continue;
            }
            seen_src.insert(s.clone());
            seen_tgt.insert(t.clone());
            out.push((s, t));
        }
        out
    };
    Lexicon {
        nouns: draw(cfg.nouns, rng),
        adjectives: draw(cfg.adjectives, rng),
        verbs: draw(cfg.verbs, rng),
    }
}

struct Sampler {
    noun: Zipf<f64>,
    adj: Zipf<f64>,
    verb: Zipf<f64>,
}

fn pick<'a>(z: &Zipf<f64>, words: &'a [(String, String)], rng: &mut ChaCha8Rng) -> &'a (String, String) {
    let r = z.sample(rng) as usize;
    &words[r.clamp(1, words.len()) - 1]
}

fn noun_phrase<'a>(lex: &'a Lexicon, s: &Sampler, p_adj: f64, rng: &mut ChaCha8Rng) -> (Vec<&'a str>, Vec<&'a str>) {
    let n = pick(&s.noun, &lex.nouns, rng);
    if rng.random::<f64>() < p_adj {
        let a = pick(&s.adj, &lex.adjectives, rng);
        (vec![&a.0, &n.0], vec![&n.1, &a.1])
    } else {
        (vec![&n.0], vec![&n.1])
    }
}

fn sentence(lex: &Lexicon, s: &Sampler, p_adj: f64, rng: &mut ChaCha8Rng) -> (String, String) {
    let (subj_s, subj_t) = noun_phrase(lex, s, p_adj, rng);
    let v = pick(&s.verb, &lex.verbs, rng);
    let mut src = subj_s;
    let mut tgt = subj_t;
    tgt.push(&v.1);
    if rng.random::<f64>() < 0.7 {
        let (obj_s, obj_t) = noun_phrase(lex, s, p_adj, rng);
        src.extend(obj_s);
        tgt.extend(obj_t);
    }
    src.push(&v.0);
    (src.join(" "), tgt.join(" "))
}

/// Generates the lexicon and train/dev/test splits deterministically from `cfg.seed`.
pub fn generate(cfg: &ToyTaskConfig) -> ToyTask {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = lexicon(cfg, &mut rng);
    let zipf = |n: usize| Zipf::new(n as f64, cfg.zipf_exponent).expect("positive lexicon size");
    let s = Sampler {
        noun: zipf(lex.nouns.len()),
        adj: zipf(lex.adjectives.len()),
        verb: zipf(lex.verbs.len()),
    };
    let mut split = |n: usize| {
        let pairs = (0..n)
            .map(|_| sentence(&lex, &s, cfg.adjective_prob, &mut rng))
            .collect();
        ParallelCorpus::new("de", "en", pairs).expect("generated lines are non-empty")
    };
    let train = split(cfg.train_pairs);
    let dev = split(cfg.dev_pairs);
    let test = split(cfg.test_pairs);
    ToyTask {
        lexicon: lex,
        train,
        dev,
        test,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// One trained system on a toy task.
#[derive(Debug, Clone)]
pub struct ToyRun {
    /// Word-level corpus BLEU of greedy dev translations with averaged parameters.
    pub dev_bleu: f64,
    pub log: Vec<LogRecord>,
    pub steps: u64,
    pub vocab_size: usize,
}

/// Prepares subwords for `keys`, trains one system and scores the dev split.
/// `model.vocab_size` is replaced by the size of the learned vocabulary.
pub fn run_toy_system(
    task: &ToyTask,
    keys: &[CipherKey],
    num_merges: usize,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    exec: Execution,
) -> Result<ToyRun, RunError> {
    let prep = prepare(&task.train, &task.dev, &Alphabet::german(), keys, num_merges, exec)?;
    let mut cfg = model.clone();
    cfg.vocab_size = prep.vocab.len();
    let mut m = Transformer::<f32>::new(cfg.clone())?;
    let data = TrainData {
        train: &prep.train,
        dev: &prep.dev,
        vocab: &prep.vocab,
    };
    let out = train(&mut m, data, train_cfg, loss_cfg, TrainOptions { exec, ..Default::default() })?;
    let avg = Transformer::with_params(cfg, out.averaged)?;
    let prefix = source_prefix(train_cfg.mode, &prep.vocab, &task.train.tgt_lang);
    let hyps = translate_sentences(&avg, &prep.merges, &prep.vocab, &task.dev.sources(), prefix, 1, 1.0, exec)?;
    let refs = task.dev.targets();
    let dev_bleu = corpus_bleu(&hyps.iter().map(String::as_str).collect::<Vec<_>>(), &refs, 4, Smoothing::Exp)
        .map(|r| r.bleu)
        .unwrap_or(0.0);
    Ok(ToyRun {
        dev_bleu,
        log: out.log,
        steps: out.steps,
        vocab_size: prep.vocab.len(),
    })
}
