//! Dense row-major matrix kernels used by the forward and backward passes.

use super::config::ModelError;
use super::Scalar;

/// Row-major matrix. Rows are sequence positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: F) -> Mat<F> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    /// Elementwise product with a mask of the same size.
    pub fn mul_mask(&mut self, mask: &[F]) {
        for (a, &m) in self.data.iter_mut().zip(mask) {
            *a *= m;
        }
    }
}

/// `A[m×k] · W[k×n]`.
pub(crate) fn matmul<F: Scalar>(a: &Mat<F>, w: &[F], n: usize) -> Mat<F> {
    let (m, k) = (a.rows, a.cols);
    debug_assert_eq!(w.len(), k * n);
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let wrow = &w[p * n..(p + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += av * wv;
            }
        }
    }
    out
}

/// `D[m×n] · W[k×n]ᵀ`, giving `m×k`.
pub(crate) fn matmul_bt<F: Scalar>(d: &Mat<F>, w: &[F], k: usize) -> Mat<F> {
    let (m, n) = (d.rows, d.cols);
    debug_assert_eq!(w.len(), k * n);
    let mut out = Mat::zeros(m, k);
    for i in 0..m {
        let drow = d.row(i);
        let orow = &mut out.data[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let wrow = &w[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&dv, &wv) in drow.iter().zip(wrow) {
                s += dv * wv;
            }
            *o = s;
        }
    }
    out
}

/// `G[k×n] += A[m×k]ᵀ · D[m×n]`.
pub(crate) fn acc_at_b<F: Scalar>(g: &mut [F], a: &Mat<F>, d: &Mat<F>) {
    let (m, k, n) = (a.rows, a.cols, d.cols);
    debug_assert_eq!(g.len(), k * n);
    for i in 0..m {
        let arow = a.row(i);
        let drow = d.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let grow = &mut g[p * n..(p + 1) * n];
            for (gv, &dv) in grow.iter_mut().zip(drow) {
                *gv += av * dv;
            }
        }
    }
}

pub(crate) fn add_bias<F: Scalar>(m: &mut Mat<F>, b: &[F]) {
    for i in 0..m.rows {
        for (x, &bv) in m.row_mut(i).iter_mut().zip(b) {
            *x += bv;
        }
    }
}

pub(crate) fn acc_colsum<F: Scalar>(g: &mut [F], d: &Mat<F>) {
    for i in 0..d.rows {
        for (gv, &dv) in g.iter_mut().zip(d.row(i)) {
            *gv += dv;
        }
    }
}

fn softmax_into<F: Scalar>(z: &[F], scale: F, out: &mut [F]) {
    let max = z.iter().fold(F::neg_infinity(), |m, &x| m.max(x * scale));
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(z) {
        *o = (x * scale - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Row-wise softmax.
pub fn softmax_rows<F: Scalar>(z: &Mat<F>) -> Mat<F> {
    let mut out = Mat::zeros(z.rows, z.cols);
    for i in 0..z.rows {
        softmax_into(z.row(i), F::one(), &mut out.data[i * z.cols..(i + 1) * z.cols]);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<F: Scalar>(z: &Mat<F>) -> Mat<F> {
    let mut out = Mat::zeros(z.rows, z.cols);
    for i in 0..z.rows {
        let row = z.row(i);
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
        for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    out
}

/// Temperature softmax `softmax(z / τ)` per row.
pub fn flatten_distribution<F: Scalar>(z: &Mat<F>, tau: f64) -> Result<Mat<F>, ModelError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ModelError::BadTemperature(tau));
    }
    let inv = F::of(1.0 / tau);
    let mut out = Mat::zeros(z.rows, z.cols);
    for i in 0..z.rows {
        softmax_into(z.row(i), inv, &mut out.data[i * z.cols..(i + 1) * z.cols]);
    }
    Ok(out)
}
