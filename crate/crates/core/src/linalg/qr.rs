use alloc::vec;
use alloc::vec::Vec;

use super::matrix::{axpy, dot, norm, Matrix};
use crate::error::{Error, Result};

/// Relative threshold below which a diagonal entry of R marks rank deficiency.
pub const QR_RANK_TOL: f64 = 1e-12;

/// Thin QR factorization `m = q · r` of a tall matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinQr {
    /// `n×p`, orthonormal columns.
    pub q: Matrix,
    /// `p×p`, upper triangular.
    pub r: Matrix,
}

/// Householder reflector `H = I − τ·v·vᵀ` with `v[0] = 1`, mapping `x` to `β·e₀`.
pub(crate) struct Reflector {
    pub v: Vec<f64>,
    pub tau: f64,
    pub beta: f64,
}

impl Reflector {
    pub fn new(x: &[f64]) -> Self {
        let mut v = x.to_vec();
        let nrm = norm(x);
        if nrm == 0.0 {
            v.iter_mut().for_each(|e| *e = 0.0);
            v[0] = 1.0;
            return Self { v, tau: 0.0, beta: 0.0 };
        }
        let x0 = x[0];
        let beta = if x0 >= 0.0 { -nrm } else { nrm };
        let denom = x0 - beta;
        for e in v.iter_mut().skip(1) {
            *e /= denom;
        }
        v[0] = 1.0;
        Self {
            v,
            tau: (beta - x0) / beta,
            beta,
        }
    }

    /// `y ← H·y` for `y` of the reflector's length.
    #[inline]
    pub fn apply(&self, y: &mut [f64]) {
        if self.tau == 0.0 {
            return;
        }
        let w = dot(&self.v, y);
        axpy(-self.tau * w, &self.v, y);
    }
}

/// Column-major copy: `cols[j]` is column `j` of `m`.
pub(crate) fn to_columns(m: &Matrix) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(m.rows()); m.cols()];
    for i in 0..m.rows() {
        for (c, &v) in cols.iter_mut().zip(m.row(i)) {
            c.push(v);
        }
    }
    cols
}

pub(crate) fn from_columns(cols: &[Vec<f64>]) -> Matrix {
    let rows = cols[0].len();
    let mut data = Vec::with_capacity(rows * cols.len());
    for i in 0..rows {
        data.extend(cols.iter().map(|c| c[i]));
    }
    Matrix::from_raw(rows, cols.len(), data)
}

/// Builds `Q[:, ..p]` from reflectors, `reflectors[j]` acting on rows `j..n`.
pub(crate) fn accumulate_q(reflectors: &[Reflector], n: usize, p: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, h) in reflectors.iter().enumerate().rev() {
        for col in q.iter_mut().skip(j) {
            h.apply(&mut col[j..]);
        }
    }
    q
}

/// Index of the largest-magnitude entry (first on ties).
pub(crate) fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = -1.0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_val {
            best = i;
            best_val = x.abs();
        }
    }
    best
}

/// Householder QR without a rank check. Columns of `q` are orthonormal
/// even when `m` is rank deficient.
///
/// # Panics
/// If `m` has more columns than rows.
pub fn householder_qr(m: &Matrix) -> ThinQr {
    let (n, p) = m.shape();
    assert!(n >= p, "thin QR needs rows >= cols");
    let mut cols = to_columns(m);
    let mut reflectors = Vec::with_capacity(p);
    let mut r = Matrix::zeros(p, p).into_vec();
    for j in 0..p {
        let h = Reflector::new(&cols[j][j..]);
        r[j * p + j] = h.beta;
        for (k, col) in cols.iter_mut().enumerate().skip(j + 1) {
            h.apply(&mut col[j..]);
            r[j * p + k] = col[j];
        }
        reflectors.push(h);
    }
    let mut q = accumulate_q(&reflectors, n, p);
    // Deterministic signs: largest-magnitude entry of each Q column is non-negative.
    for (j, col) in q.iter_mut().enumerate() {
        if col[argmax_abs(col)] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
            for v in &mut r[j * p..(j + 1) * p] {
                *v = -*v;
            }
        }
    }
    ThinQr {
        q: from_columns(&q),
        r: Matrix::from_raw(p, p, r),
    }
}

/// Thin QR of a full-column-rank matrix.
///
/// Fails with [`Error::RankDeficient`] naming the first column whose diagonal
/// entry in R falls below `1e-12` times the largest one.
pub fn thin_qr(m: &Matrix) -> Result<ThinQr> {
    let (n, p) = m.shape();
    if n < p {
        return Err(Error::RankDeficient { column: n, ratio: 0.0 });
    }
    let qr = householder_qr(m);
    let diag: Vec<f64> = (0..p).map(|j| qr.r.get(j, j).abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    for (j, &d) in diag.iter().enumerate() {
        let ratio = if max > 0.0 { d / max } else { 0.0 };
        if ratio < QR_RANK_TOL {
            return Err(Error::RankDeficient { column: j, ratio });
        }
    }
    Ok(qr)
}
