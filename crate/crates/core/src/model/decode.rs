use super::config::ModelError;
use super::ops::log_softmax_rows;
use super::transformer::{Encoded, Transformer};
use super::Scalar;
use crate::subword::{BOS_ID, EOS_ID, PAD_ID};

/// A decoded target sequence. `tokens` excludes bos and eos.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities, including eos when `finished`.
    pub log_prob: f64,
    /// `log_prob / len^len_penalty`, with `len` counting eos.
    pub score: f64,
    pub finished: bool,
}

fn normalized(log_prob: f64, len: usize, len_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(len_penalty)
}

fn step_log_probs<F: Scalar>(model: &Transformer<F>, enc: &Encoded<F>, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
    let logits = model.decoder_logits(enc, prefix)?;
    let lp = log_softmax_rows(&logits);
    let mut row: Vec<f64> = lp.row(lp.rows - 1).iter().map(|x| x.f64()).collect();
    row[PAD_ID as usize] = f64::NEG_INFINITY;
    row[BOS_ID as usize] = f64::NEG_INFINITY;
    Ok(row)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn step_limit<F: Scalar>(model: &Transformer<F>, max_len: usize) -> usize {
    max_len.min(model.config.max_len)
}

/// Argmax decoding until eos or `max_len` generated tokens.
pub fn greedy<F: Scalar>(model: &Transformer<F>, src: &[u32], max_len: usize, len_penalty: f64) -> Result<Hypothesis, ModelError> {
    let enc = model.encode(src)?;
    let mut prefix = vec![BOS_ID];
    let mut log_prob = 0.0;
    let mut finished = false;
    for _ in 0..step_limit(model, max_len) {
        let row = step_log_probs(model, &enc, &prefix)?;
        let tok = argmax(&row);
        log_prob += row[tok];
        if tok as u32 == EOS_ID {
            finished = true;
            break;
        }
        prefix.push(tok as u32);
    }
    let len = prefix.len() - 1 + usize::from(finished);
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        score: normalized(log_prob, len, len_penalty),
        finished,
    })
}

/// Length-normalized score of a given target under the model; eos is appended.
pub fn sequence_score<F: Scalar>(model: &Transformer<F>, src: &[u32], tokens: &[u32], len_penalty: f64) -> Result<f64, ModelError> {
    let enc = model.encode(src)?;
    let mut tgt_in = vec![BOS_ID];
    tgt_in.extend_from_slice(tokens);
    let lp = log_softmax_rows(&model.decoder_logits(&enc, &tgt_in)?);
    let log_prob: f64 = tokens
        .iter()
        .chain(std::iter::once(&EOS_ID))
        .enumerate()
        .map(|(t, &y)| lp.row(t)[y as usize].f64())
        .sum();
    Ok(normalized(log_prob, tokens.len() + 1, len_penalty))
}

struct Beam {
    prefix: Vec<u32>,
    log_prob: f64,
}

/// Beam search with score `log p / len^len_penalty`. `beam == 1` is greedy
/// decoding, and the greedy hypothesis always competes in the final ranking.
pub fn beam_search<F: Scalar>(
    model: &Transformer<F>,
    src: &[u32],
    beam: usize,
    len_penalty: f64,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    let greedy_hyp = greedy(model, src, max_len, len_penalty)?;
    if beam <= 1 {
        return Ok(greedy_hyp);
    }
    let enc = model.encode(src)?;
    let mut alive = vec![Beam {
        prefix: vec![BOS_ID],
        log_prob: 0.0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..step_limit(model, max_len) {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, b) in alive.iter().enumerate() {
            let row = step_log_probs(model, &enc, &b.prefix)?;
            let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i].is_finite()).collect();
            idx.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            for &tok in idx.iter().take(beam) {
                cands.push((b.log_prob + row[tok], bi, tok as u32));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (lp, bi, tok) in cands.into_iter().take(beam) {
            let prefix = &alive[bi].prefix;
            if tok == EOS_ID {
                done.push(Hypothesis {
                    tokens: prefix[1..].to_vec(),
                    log_prob: lp,
                    score: normalized(lp, prefix.len(), len_penalty),
                    finished: true,
                });
            } else {
                let mut p = prefix.clone();
                p.push(tok);
                next.push(Beam { prefix: p, log_prob: lp });
            }
        }
        alive = next;
        if alive.is_empty() || done.len() >= beam {
            break;
        }
    }
    if done.is_empty() {
        done.extend(alive.into_iter().map(|b| Hypothesis {
            score: normalized(b.log_prob, b.prefix.len() - 1, len_penalty),
            tokens: b.prefix[1..].to_vec(),
            log_prob: b.log_prob,
            finished: false,
        }));
    }
    done.push(greedy_hyp);
    let best = done
        .into_iter()
        .reduce(|a, b| if b.score > a.score { b } else { a })
        .expect("at least the greedy hypothesis");
    Ok(best)
}
