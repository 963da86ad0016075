use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{sentence_bleu, Smoothing};
use crate::exec::Execution;
use crate::model::{beam_search, Scalar, Transformer};
use crate::subword::Vocab;

#[derive(Debug, Error)]
pub enum HallucinationError {
    #[error("perturbation spec: {0}")]
    Spec(String),
    #[error("translation failed: {0}")]
    Translate(String),
}

/// Anything that maps a tokenized source to a tokenized output.
pub trait Translator: Sync {
    fn translate(&self, source: &[String]) -> Result<Vec<String>, HallucinationError>;
}

/// Beam-search translation with a trained model.
pub struct ModelTranslator<'a, F> {
    pub model: &'a Transformer<F>,
    pub vocab: &'a Vocab,
    /// Tag id prepended to every source (tagged training modes).
    pub prefix: Option<u32>,
    pub beam: usize,
    pub len_penalty: f64,
    pub max_len: usize,
}

impl<F: Scalar> Translator for ModelTranslator<'_, F> {
    fn translate(&self, source: &[String]) -> Result<Vec<String>, HallucinationError> {
        let ids: Vec<u32> = self
            .prefix
            .into_iter()
            .chain(source.iter().map(|t| self.vocab.id_or_unk(t)))
            .collect();
        let h = beam_search(self.model, &ids, self.beam, self.len_penalty, self.max_len)
            .map_err(|e| HallucinationError::Translate(e.to_string()))?;
        Ok(self.vocab.decode_ids(&h.tokens).into_iter().map(String::from).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Tokens inserted into each source.
    pub tokens: Vec<String>,
    /// Sentence BLEU (percent) below which an output change is flagged.
    pub threshold: f64,
    /// Seeds the choice of interior insertion positions.
    pub seed: u64,
}

impl PerturbationSpec {
    /// The `m` most frequent learned subwords of `vocab`.
    pub fn top_m(vocab: &Vocab, m: usize, threshold: f64, seed: u64) -> Self {
        PerturbationSpec {
            tokens: vocab.learned().take(m).map(|(t, _)| t.to_string()).collect(),
            threshold,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), HallucinationError> {
        if self.tokens.is_empty() {
            return Err(HallucinationError::Spec("need at least one perturbation token".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 100.0) {
            return Err(HallucinationError::Spec(format!(
                "threshold must be in (0, 100), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Insertion points for `token` in sentence `sentence` of length `len`: the
/// front, plus one interior point in `1..len` when the sentence has one. The
/// interior point depends only on `(seed, sentence, token)`.
pub fn insertion_positions(seed: u64, sentence: usize, len: usize, token: &str) -> Vec<usize> {
    let mut out = vec![0];
    if len >= 2 {
        let h = mix(mix(seed ^ mix(sentence as u64)) ^ fnv1a(token));
        out.push(1 + (h % (len as u64 - 1)) as usize);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationRecord {
    pub sentence: usize,
    pub token: String,
    pub position: usize,
    /// Sentence BLEU of the perturbed output against the original output.
    pub bleu: f64,
    pub original: String,
    pub perturbed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    /// Distinct sentences with at least one flagged perturbation.
    pub count: usize,
    pub sentences: usize,
    pub perturbations: usize,
    /// Every flagged perturbation.
    pub records: Vec<HallucinationRecord>,
}

fn similarity(hyp: &[String], reference: &[String]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 100.0 } else { 0.0 };
    }
    sentence_bleu(&hyp.join(" "), &reference.join(" "), Smoothing::Exp).unwrap_or(0.0)
}

/// Translates every source, re-translates each perturbed copy and flags
/// perturbations whose output has sentence BLEU below the threshold against
/// the unperturbed output.
pub fn count_hallucinations<T: Translator>(
    translator: &T,
    sources: &[Vec<String>],
    spec: &PerturbationSpec,
    exec: Execution,
) -> Result<HallucinationReport, HallucinationError> {
    spec.validate()?;
    let per_sentence = exec.map_range(sources.len(), |i| -> Result<(Vec<HallucinationRecord>, usize), HallucinationError> {
        let src = &sources[i];
        let original = translator.translate(src)?;
        let mut flagged = Vec::new();
        let mut tried = 0;
        for tok in &spec.tokens {
            for pos in insertion_positions(spec.seed, i, src.len(), tok) {
                tried += 1;
                let mut x = src.clone();
                x.insert(pos, tok.clone());
                let y = translator.translate(&x)?;
                let bleu = similarity(&y, &original);
                if bleu < spec.threshold {
                    flagged.push(HallucinationRecord {
                        sentence: i,
                        token: tok.clone(),
                        position: pos,
                        bleu,
                        original: original.join(" "),
                        perturbed: y.join(" "),
                    });
                }
            }
        }
        Ok((flagged, tried))
    });
    let mut records = Vec::new();
    let mut count = 0;
    let mut perturbations = 0;
    for r in per_sentence {
        let (flagged, tried) = r?;
        count += usize::from(!flagged.is_empty());
        perturbations += tried;
        records.extend(flagged);
    }
    Ok(HallucinationReport {
        count,
        sentences: sources.len(),
        perturbations,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;
    impl Translator for Constant {
        fn translate(&self, _: &[String]) -> Result<Vec<String>, HallucinationError> {
            Ok(vec!["the".into(), "same".into(), "output".into()])
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn constant_output_never_hallucinates() {
        let src = vec![toks("a b c"), toks("d e"), toks("f")];
        let spec = PerturbationSpec {
            tokens: vec!["x".into(), "y".into()],
            threshold: 1.0,
            seed: 3,
        };
        let r = count_hallucinations(&Constant, &src, &spec, Execution::Sequential).unwrap();
        assert_eq!(r.count, 0);
        assert_eq!(r.perturbations, 2 * (2 + 2 + 1));
    }

    #[test]
    fn positions_front_and_interior() {
        assert_eq!(insertion_positions(0, 0, 1, "x"), vec![0]);
        for i in 0..50 {
            let p = insertion_positions(9, i, 5, "tok");
            assert_eq!(p[0], 0);
            assert!((1..5).contains(&p[1]));
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = PerturbationSpec {
            tokens: vec![],
            threshold: 1.0,
            seed: 0,
        };
        assert!(s.validate().is_err());
        s.tokens.push("a".into());
        s.threshold = 100.0;
        assert!(s.validate().is_err());
    }
}
