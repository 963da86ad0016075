use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::pwcca::{pwcca, PwccaError};
use crate::exec::Execution;
use crate::model::{ModelError, Scalar, Transformer};

/// How encoder states become matrix rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One row per source position.
    #[default]
    AllPositions,
    /// One row per sentence: the mean over its positions.
    MeanPerSentence,
}

/// Encoder activations of one layer; rows are samples, columns hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    /// Encoder layer, counting from 1.
    pub layer: usize,
    /// Input encoding label such as `plain` or `rot1`.
    pub encoding: String,
    pub pooling: Pooling,
    pub data: DMatrix<f64>,
}

const CHUNK: usize = 64;

/// Runs the encoder over `sources` (dropout off) and stacks the residual
/// stream after each layer. Sentences are processed in chunks so only the
/// collected rows stay in memory; collection stops once `max_rows` rows exist.
pub fn collect_activations<F: Scalar>(
    model: &Transformer<F>,
    sources: &[Vec<u32>],
    encoding: &str,
    pooling: Pooling,
    max_rows: Option<usize>,
    exec: Execution,
) -> Result<Vec<ActivationMatrix>, ModelError> {
    let layers = model.config.layers;
    let d = model.config.embed_dim;
    let cap = max_rows.unwrap_or(usize::MAX);
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut count = 0;
    'chunks: for chunk in sources.chunks(CHUNK) {
        let encoded = exec.map(chunk, |s| model.encode(s));
        for enc in encoded {
            let enc = enc?;
            let take = match pooling {
                Pooling::AllPositions => enc.out.rows.min(cap - count),
                Pooling::MeanPerSentence => 1,
            };
            for (l, m) in enc.layers.iter().enumerate() {
                match pooling {
                    Pooling::AllPositions => {
                        rows[l].extend(m.data[..take * d].iter().map(|x| x.f64()));
                    }
                    Pooling::MeanPerSentence => {
                        let n = m.rows as f64;
                        rows[l].extend((0..d).map(|j| (0..m.rows).map(|i| m.row(i)[j].f64()).sum::<f64>() / n));
                    }
                }
            }
            count += take;
            if count >= cap {
                break 'chunks;
            }
        }
    }
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(l, data)| ActivationMatrix {
            layer: l + 1,
            encoding: encoding.to_string(),
            pooling,
            data: DMatrix::from_row_slice(count, d, &data),
        })
        .collect())
}

/// `out[i][j] = pwcca(a[i], b[j])`.
pub fn pwcca_heatmap(a: &[ActivationMatrix], b: &[ActivationMatrix], exec: Execution) -> Result<Vec<Vec<f64>>, PwccaError> {
    let cells = exec.map_range(a.len() * b.len(), |k| pwcca(&a[k / b.len()].data, &b[k % b.len()].data).map(|r| r.value));
    let mut out = vec![Vec::with_capacity(b.len()); a.len()];
    for (k, c) in cells.into_iter().enumerate() {
        out[k / b.len()].push(c?);
    }
    Ok(out)
}

/// Comma-separated matrix with a header row of column labels and a leading
/// column of row labels.
pub fn heatmap_csv(values: &[Vec<f64>], row_labels: &[String], col_labels: &[String]) -> String {
    let mut s = String::from("layer");
    for c in col_labels {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (label, row) in row_labels.iter().zip(values) {
        s.push_str(label);
        for v in row {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    s
}
