use serde::{Deserialize, Serialize};

/// Per-side aggregate of sentence-level minimum subword frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideSummary {
    pub side: String,
    pub mean: f64,
    pub median: f64,
    /// Fraction of sentences whose minimum exceeds the first (plain) side's;
    /// `None` for the plain side itself.
    pub frac_above_plain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarityReport {
    pub sides: Vec<String>,
    /// `min_freq[sentence][side]`.
    pub min_freq: Vec<Vec<u64>>,
    /// The rarest subword behind each entry of `min_freq` (first on ties).
    pub rarest: Vec<Vec<String>>,
    pub summary: Vec<SideSummary>,
}

/// The first least-frequent token of a segmented sentence and its frequency.
pub fn rarest_subword<S: AsRef<str>>(tokens: &[S], freq: impl Fn(&str) -> u64) -> Option<(String, u64)> {
    let mut best: Option<(&str, u64)> = None;
    for t in tokens {
        let f = freq(t.as_ref());
        if best.is_none_or(|(_, b)| f < b) {
            best = Some((t.as_ref(), f));
        }
    }
    best.map(|(t, f)| (t.to_string(), f))
}

fn median(xs: &mut [u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2] as f64
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) as f64 / 2.0
    }
}

/// Rarest-subword frequency per sentence and side. `sides[0]` is the
/// plaintext; the others are its cipher views, aligned by sentence. Empty
/// sentences count as frequency 0.
pub fn rare_subword_stats<S: AsRef<str>>(sides: &[(&str, &[Vec<S>])], freq: impl Fn(&str) -> u64) -> RarityReport {
    let n = sides.iter().map(|(_, s)| s.len()).min().unwrap_or(0);
    let mut min_freq = vec![Vec::with_capacity(sides.len()); n];
    let mut rarest = vec![Vec::with_capacity(sides.len()); n];
    for (_, sents) in sides {
        for i in 0..n {
            let (t, f) = rarest_subword(&sents[i], &freq).unwrap_or_default();
            min_freq[i].push(f);
            rarest[i].push(t);
        }
    }
    let summary = sides
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let mut col: Vec<u64> = min_freq.iter().map(|r| r[k]).collect();
            let mean = if n == 0 { 0.0 } else { col.iter().sum::<u64>() as f64 / n as f64 };
            let frac_above_plain = (k > 0 && n > 0).then(|| {
                min_freq.iter().filter(|r| r[k] > r[0]).count() as f64 / n as f64
            });
            SideSummary {
                side: name.to_string(),
                mean,
                median: median(&mut col),
                frac_above_plain,
            }
        })
        .collect();
    RarityReport {
        sides: sides.iter().map(|(s, _)| s.to_string()).collect(),
        min_freq,
        rarest,
        summary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn repeated_token_sentence() {
        let f: HashMap<&str, u64> = [("a", 4), ("b", 9)].into();
        let plain = vec![vec!["a", "a", "a"]];
        let ciph = vec![vec!["b", "b"]];
        let r = rare_subword_stats(&[("plain", &plain), ("rot1", &ciph)], |t| f.get(t).copied().unwrap_or(0));
        assert_eq!(r.min_freq, vec![vec![4, 9]]);
        assert_eq!(r.summary[1].frac_above_plain, Some(1.0));
        assert_eq!(r.summary[0].frac_above_plain, None);
    }

    #[test]
    fn ties_pick_first_and_median() {
        let f = |_: &str| 1;
        assert_eq!(rarest_subword(&["y", "x"], f).unwrap().0, "y");
        assert_eq!(median(&mut [5, 1, 3, 2]), 2.5);
    }
}
