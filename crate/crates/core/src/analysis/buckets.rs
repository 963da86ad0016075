use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::eval::{sentence_bleu, Smoothing};

/// Token-level match statistics for reference-frequency range `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqBucket {
    pub lo: u64,
    /// `None` for the open last bucket.
    pub hi: Option<u64>,
    pub hyp_tokens: u64,
    pub ref_tokens: u64,
    pub matches: u64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Mean sentence BLEU of sentences whose reference length is in `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LenBucket {
    pub lo: usize,
    pub hi: Option<usize>,
    pub sentences: usize,
    pub mean_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub frequency: Vec<FreqBucket>,
    pub length: Vec<LenBucket>,
}

fn bucket_of<T: PartialOrd + Copy>(x: T, edges: &[T]) -> usize {
    edges.iter().take_while(|&&e| e <= x).count()
}

fn bounds<T: Copy + Default>(b: usize, edges: &[T]) -> (T, Option<T>) {
    let lo = if b == 0 { T::default() } else { edges[b - 1] };
    (lo, edges.get(b).copied())
}

/// Output quality bucketed by training frequency of tokens and by reference
/// length. Frequency edges `[e1, e2, ...]` give buckets `[0,e1), [e1,e2), ...,
/// [ek,∞)`; length edges work the same way. A token type matches up to the
/// smaller of its counts in the hypothesis and the reference; each side's
/// tokens fall in the bucket of their own training frequency. Buckets with no
/// tokens (or sentences) are omitted.
pub fn bucketed_quality<S: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
    freq: impl Fn(&str) -> u64,
    freq_edges: &[u64],
    len_edges: &[usize],
) -> BucketReport {
    let nb = freq_edges.len() + 1;
    let (mut hyp_n, mut ref_n, mut hit) = (vec![0u64; nb], vec![0u64; nb], vec![0u64; nb]);
    let nl = len_edges.len() + 1;
    let (mut len_sum, mut len_cnt) = (vec![0.0; nl], vec![0usize; nl]);
    for (h, r) in hyps.iter().zip(refs) {
        let mut hc: HashMap<&str, u64> = HashMap::new();
        let mut rc: HashMap<&str, u64> = HashMap::new();
        for t in h {
            *hc.entry(t.as_ref()).or_default() += 1;
        }
        for t in r {
            *rc.entry(t.as_ref()).or_default() += 1;
        }
        for (t, &c) in &hc {
            let b = bucket_of(freq(t), freq_edges);
            hyp_n[b] += c;
            hit[b] += c.min(rc.get(t).copied().unwrap_or(0));
        }
        for (t, &c) in &rc {
            ref_n[bucket_of(freq(t), freq_edges)] += c;
        }
        if !r.is_empty() {
            let hs: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
            let rs: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
            let b = bucket_of(r.len(), len_edges);
            len_sum[b] += sentence_bleu(&hs.join(" "), &rs.join(" "), Smoothing::Exp).unwrap_or(0.0);
            len_cnt[b] += 1;
        }
    }
    let frequency = (0..nb)
        .filter(|&b| hyp_n[b] + ref_n[b] > 0)
        .map(|b| {
            let p = if hyp_n[b] > 0 { hit[b] as f64 / hyp_n[b] as f64 } else { 0.0 };
            let r = if ref_n[b] > 0 { hit[b] as f64 / ref_n[b] as f64 } else { 0.0 };
            let (lo, hi) = bounds(b, freq_edges);
            FreqBucket {
                lo,
                hi,
                hyp_tokens: hyp_n[b],
                ref_tokens: ref_n[b],
                matches: hit[b],
                precision: p,
                recall: r,
                f_measure: if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 },
            }
        })
        .collect();
    let length = (0..nl)
        .filter(|&b| len_cnt[b] > 0)
        .map(|b| {
            let (lo, hi) = bounds(b, len_edges);
            LenBucket {
                lo,
                hi,
                sentences: len_cnt[b],
                mean_bleu: len_sum[b] / len_cnt[b] as f64,
            }
        })
        .collect();
    BucketReport { frequency, length }
}
