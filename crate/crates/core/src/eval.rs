//! Tokenized BLEU and paired bootstrap resampling.
//!
//! Inputs are already tokenized: hypotheses and references are compared
//! token-by-token after splitting on whitespace.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty reference")]
    EmptyReference,
    #[error("{hyps} hypotheses for {refs} references")]
    Misaligned { hyps: usize, refs: usize },
    #[error("at least 100 bootstrap samples are required, got {0}")]
    TooFewSamples(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    None,
    /// Zero-match orders get `1 / (2^k · total)` for the k-th such order.
    #[default]
    Exp,
}

/// Sufficient statistics for BLEU over one or more sentences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NgramStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl NgramStats {
    fn zero(max_n: usize) -> Self {
        NgramStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    fn add(&mut self, o: &NgramStats) {
        for n in 0..self.matches.len() {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// BLEU in percent.
    pub bleu: f64,
    /// Modified n-gram precisions as fractions, after smoothing.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<'t, 'a>(toks: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], u64> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram statistics of one hypothesis against one reference.
pub fn sentence_stats(hyp: &str, reference: &str, max_n: usize) -> NgramStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut s = NgramStats::zero(max_n);
    s.hyp_len = h.len() as u64;
    s.ref_len = r.len() as u64;
    for n in 1..=max_n {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        s.totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
        s.matches[n - 1] = hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

/// BLEU from accumulated statistics. With `effective_order`, orders for which
/// the hypothesis has no n-grams are dropped from the geometric mean.
pub fn bleu_from_stats(s: &NgramStats, smoothing: Smoothing, effective_order: bool) -> BleuReport {
    let max_n = s.matches.len();
    let mut precisions = vec![0.0; max_n];
    let mut order = max_n;
    let mut zeros = 1.0;
    for n in 0..max_n {
        if s.totals[n] == 0 {
            if effective_order {
                order = n;
            }
            break;
        }
        precisions[n] = if s.matches[n] > 0 {
            s.matches[n] as f64 / s.totals[n] as f64
        } else {
            match smoothing {
                Smoothing::Exp => {
                    zeros *= 2.0;
                    1.0 / (zeros * s.totals[n] as f64)
                }
                Smoothing::None => 0.0,
            }
        };
    }
    let bp = if s.hyp_len == 0 {
        0.0
    } else if s.hyp_len < s.ref_len {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if order == 0 || precisions[..order].iter().any(|&p| p == 0.0) || bp == 0.0 {
        0.0
    } else {
        let mean = precisions[..order].iter().map(|p| p.ln()).sum::<f64>() / order as f64;
        100.0 * bp * mean.exp()
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty: bp,
        hyp_len: s.hyp_len,
        ref_len: s.ref_len,
    }
}

fn check_aligned<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<(), EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Misaligned {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(())
}

/// Corpus BLEU with clipped precisions and a corpus-level brevity penalty.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], max_n: usize, smoothing: Smoothing) -> Result<BleuReport, EvalError> {
    check_aligned(hyps, refs)?;
    let mut total = NgramStats::zero(max_n);
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&sentence_stats(h.as_ref(), r.as_ref(), max_n));
    }
    Ok(bleu_from_stats(&total, smoothing, false))
}

/// Smoothed 4-gram BLEU of a single sentence, in percent.
pub fn sentence_bleu(hyp: &str, reference: &str, smoothing: Smoothing) -> Result<f64, EvalError> {
    if reference.split_whitespace().next().is_none() {
        return Err(EvalError::EmptyReference);
    }
    Ok(bleu_from_stats(&sentence_stats(hyp, reference, 4), smoothing, true).bleu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub bleu_a: f64,
    pub bleu_b: f64,
    pub samples: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    /// `(wins_a + ties/2) / samples`.
    pub win_rate_a: f64,
    /// Fraction of resamples where the system with the lower full-corpus
    /// score wins or ties.
    pub p_value: f64,
}

/// Generator for resample `r`: a ChaCha8 stream keyed by `seed`, stream id `r`.
pub fn resample_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

/// Paired bootstrap resampling over sentence indices.
pub fn bootstrap_compare<S: AsRef<str> + Sync>(
    sys_a: &[S],
    sys_b: &[S],
    refs: &[S],
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<BootstrapResult, EvalError> {
    check_aligned(sys_a, refs)?;
    check_aligned(sys_b, refs)?;
    if samples < 100 {
        return Err(EvalError::TooFewSamples(samples));
    }
    let n = refs.len();
    let stats_a: Vec<NgramStats> = exec.map_range(n, |i| sentence_stats(sys_a[i].as_ref(), refs[i].as_ref(), 4));
    let stats_b: Vec<NgramStats> = exec.map_range(n, |i| sentence_stats(sys_b[i].as_ref(), refs[i].as_ref(), 4));
    let sum = |stats: &[NgramStats], idx: &[usize]| {
        let mut t = NgramStats::zero(4);
        for &i in idx {
            t.add(&stats[i]);
        }
        bleu_from_stats(&t, Smoothing::Exp, false).bleu
    };
    let all: Vec<usize> = (0..n).collect();
    let bleu_a = sum(&stats_a, &all);
    let bleu_b = sum(&stats_b, &all);
    let outcomes = exec.map_range(samples, |r| {
        let mut rng = resample_rng(seed, r);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let a = sum(&stats_a, &idx);
        let b = sum(&stats_b, &idx);
        a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
    });
    let wins_a = outcomes.iter().filter(|o| o.is_gt()).count();
    let wins_b = outcomes.iter().filter(|o| o.is_lt()).count();
    let ties = samples - wins_a - wins_b;
    let lower_wins = if bleu_a >= bleu_b { wins_b } else { wins_a };
    Ok(BootstrapResult {
        bleu_a,
        bleu_b,
        samples,
        wins_a,
        wins_b,
        ties,
        win_rate_a: (wins_a as f64 + 0.5 * ties as f64) / samples as f64,
        p_value: (lower_wins + ties) as f64 / samples as f64,
    })
}
