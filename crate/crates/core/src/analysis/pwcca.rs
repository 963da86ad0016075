use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Singular values below `RANK_TOLERANCE · σ_max` count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum PwccaError {
    #[error("row counts differ: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("need more rows ({rows}) than columns ({cols})")]
    TooFewRows { rows: usize, cols: usize },
    #[error("activation matrix has no variance")]
    Degenerate,
    #[error("activation matrix contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwccaResult {
    /// `Σ α_i ρ_i`.
    pub value: f64,
    /// Canonical correlations, descending.
    pub correlations: Vec<f64>,
    /// Projection weights `α_i`, summing to 1.
    pub weights: Vec<f64>,
    /// Effective ranks after the tolerance cut.
    pub rank_x: usize,
    pub rank_y: usize,
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// Orthonormal basis of the column space. Full-rank inputs use QR; rank
/// deficient ones keep the left singular vectors above the tolerance.
fn basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>, PwccaError> {
    let svd = m.clone().svd(true, false);
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(PwccaError::Degenerate);
    }
    let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] > RANK_TOLERANCE * smax).collect();
    if keep.len() == m.ncols() {
        return Ok(m.clone().qr().q());
    }
    let u = svd.u.expect("requested u");
    Ok(u.select_columns(keep.iter()))
}

fn check(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(), PwccaError> {
    if x.nrows() != y.nrows() {
        return Err(PwccaError::RowMismatch(x.nrows(), y.nrows()));
    }
    let cols = x.ncols().max(y.ncols());
    if x.nrows() <= cols {
        return Err(PwccaError::TooFewRows { rows: x.nrows(), cols });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(PwccaError::NonFinite);
    }
    Ok(())
}

/// Projection-weighted CCA similarity of two activation matrices whose rows
/// are the same samples.
///
/// Columns are centered and orthonormalized; the singular values of
/// `Q_xᵀ Q_y` are the canonical correlations. Each canonical variate
/// `h_i = Q_x u_i` of `X` is weighted by `Σ_j |⟨h_i, x_j⟩|` over the centered
/// columns `x_j`, normalized to sum to one.
pub fn pwcca(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<PwccaResult, PwccaError> {
    check(x, y)?;
    let xc = centered(x);
    let qx = basis(&xc)?;
    let qy = basis(&centered(y))?;
    let m = qx.transpose() * &qy;
    let svd = m.svd(true, false);
    let u = svd.u.expect("requested u");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let correlations: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].clamp(0.0, 1.0)).collect();
    let h = &qx * u.select_columns(order.iter());
    let proj = h.transpose() * &xc;
    let raw: Vec<f64> = proj.row_iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    };
    let value = weights.iter().zip(&correlations).map(|(a, r)| a * r).sum::<f64>().clamp(0.0, 1.0);
    Ok(PwccaResult {
        value,
        correlations,
        weights,
        rank_x: qx.ncols(),
        rank_y: qy.ncols(),
    })
}

/// Unweighted mean of the canonical correlations.
pub fn mean_cca(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64, PwccaError> {
    let r = pwcca(x, y)?;
    Ok(r.correlations.iter().sum::<f64>() / r.correlations.len() as f64)
}
