//! Thin singular value decomposition.
//!
//! The input `A` (m×n) is first reduced with a column-pivoted Householder QR of
//! `Aᵀ`, i.e. `Aᵀ·Π = Q·R`, which costs `O(m·n·p)` for `p` retained steps and
//! reveals the numerical rank when a tolerance is supplied. The small factor
//! `B = Π·Rᵀ` (m×p) is then diagonalized by one-sided Jacobi rotations,
//! `B·W = U·Σ`, giving `A = U·Σ·(Q·W)ᵀ`.

use alloc::vec;
use alloc::vec::Vec;

use super::matrix::{dot, norm, Matrix};
use super::qr::{accumulate_q, argmax_abs, from_columns, Reflector};
use crate::error::{Error, Result};

/// Default relative threshold (`σᵢ ≤ tol·σ₁` counts as zero) for numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const DEFAULT_MAX_SWEEPS: usize = 64;

/// `A = u · diag(sigma) · vt` with `sigma` non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_columns(&self.sigma).mul(&self.vt)
    }

    /// Right singular vectors as columns (n×p).
    pub fn v(&self) -> Matrix {
        self.vt.transpose()
    }

    /// Keeps the leading `k` triplets.
    pub fn truncate(&self, k: usize) -> ThinSvd {
        let k = k.clamp(1, self.rank());
        ThinSvd {
            u: self.u.columns(0, k),
            sigma: self.sigma[..k].to_vec(),
            vt: self.vt.row_range(0, k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdOptions {
    /// When set, only triplets with `σᵢ > rank_tol·σ₁` are returned and the
    /// reduction stops as soon as the remaining part is below that level.
    /// `None` returns all `min(m, n)` triplets.
    pub rank_tol: Option<f64>,
    pub max_sweeps: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            rank_tol: None,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

impl SvdOptions {
    pub fn numerical_rank(tol: f64) -> Self {
        Self {
            rank_tol: Some(tol),
            ..Self::default()
        }
    }
}

/// Number of singular values above `tol·σ₁`.
pub fn numerical_rank(sigma: &[f64], tol: f64) -> usize {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sigma.iter().take_while(|&&s| s > tol * top).count()
}

/// Full thin SVD, `p = min(m, n)`.
pub fn thin_svd(m: &Matrix) -> Result<ThinSvd> {
    thin_svd_with(m.clone(), &SvdOptions::default())
}

pub fn thin_svd_with(m: Matrix, opts: &SvdOptions) -> Result<ThinSvd> {
    let (rows, cols) = m.shape();
    let p_max = rows.min(cols);
    let mut a = m.into_vec();

    // Pivoted Householder QR of Aᵀ: the columns of Aᵀ are the rows of A.
    let mut perm: Vec<usize> = (0..rows).collect();
    let mut norms: Vec<f64> = a.chunks_exact(cols).map(|r| dot(r, r)).collect();
    let mut reflectors: Vec<Reflector> = Vec::with_capacity(p_max);
    let mut r_rows: Vec<Vec<f64>> = Vec::with_capacity(p_max);
    let mut stop_sq = None;

    for j in 0..p_max {
        let mut pivot = j;
        for i in j + 1..rows {
            if norms[i] > norms[pivot] {
                pivot = i;
            }
        }
        let pivot_sq = norms[pivot];
        if let Some(tol) = opts.rank_tol {
            let threshold = *stop_sq.get_or_insert_with(|| {
                // ‖residual‖₂ ≤ √rows · max column norm, so this bounds what is dropped by tol·σ₁.
                let t = tol * libm::sqrt(pivot_sq) / libm::sqrt(rows as f64);
                t * t
            });
            if pivot_sq <= threshold {
                break;
            }
        }
        if pivot != j {
            perm.swap(j, pivot);
            norms.swap(j, pivot);
            for r in &mut r_rows {
                r.swap(j, pivot);
            }
            let (head, tail) = a.split_at_mut(pivot * cols);
            head[j * cols..(j + 1) * cols].swap_with_slice(&mut tail[..cols]);
        }
        let h = Reflector::new(&a[j * cols + j..(j + 1) * cols]);
        let mut r_row = vec![0.0; rows];
        r_row[j] = h.beta;
        for (i, row) in a.chunks_exact_mut(cols).enumerate().skip(j + 1) {
            let seg = &mut row[j..];
            h.apply(seg);
            r_row[i] = seg[0];
            norms[i] = dot(&seg[1..], &seg[1..]);
        }
        reflectors.push(h);
        r_rows.push(r_row);
    }
    drop(a);

    let p = reflectors.len();
    if p == 0 {
        // Zero matrix under a rank tolerance.
        let mut u = Matrix::zeros(rows, 1);
        let mut vt = Matrix::zeros(1, cols);
        u = set_entry(u, 0, 0, 1.0);
        vt = set_entry(vt, 0, 0, 1.0);
        return Ok(ThinSvd { u, sigma: vec![0.0], vt });
    }

    // B = Π·Rᵀ as p columns of length `rows`.
    let mut b: Vec<Vec<f64>> = r_rows
        .iter()
        .map(|r| {
            let mut col = vec![0.0; rows];
            for (pos, &orig) in perm.iter().enumerate() {
                col[orig] = r[pos];
            }
            col
        })
        .collect();
    let q = accumulate_q(&reflectors, cols, p);

    let mut w: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            e
        })
        .collect();
    jacobi(&mut b, &mut w, opts.max_sweeps)?;

    let mut sigma: Vec<f64> = b.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));

    let keep = match opts.rank_tol {
        Some(tol) => numerical_rank(&order.iter().map(|&i| sigma[i]).collect::<Vec<_>>(), tol).max(1),
        None => p,
    };
    let order = &order[..keep];
    let sigma_max = sigma[order[0]];
    let zero_level = sigma_max * f64::EPSILON * (rows.max(cols) as f64);

    // V = Q·W, column i of V is Q·w_i.
    let mut v_cols: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let mut col = vec![0.0; cols];
            for (qk, &wk) in q.iter().zip(&w[i]) {
                for (c, &qv) in col.iter_mut().zip(qk) {
                    *c += wk * qv;
                }
            }
            col
        })
        .collect();

    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&i| {
            let s = sigma[i];
            if s > zero_level && s > 0.0 {
                Some(b[i].iter().map(|v| v / s).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut u_cols, rows);
    let mut u_cols: Vec<Vec<f64>> = u_cols.into_iter().map(Option::unwrap).collect();
    sigma = order.iter().map(|&i| sigma[i]).collect();

    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if v[argmax_abs(v)] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
            u.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = from_columns(&u_cols);
    let mut vt_data = Vec::with_capacity(keep * cols);
    for v in &v_cols {
        vt_data.extend_from_slice(v);
    }
    Ok(ThinSvd {
        u,
        sigma,
        vt: Matrix::from_raw(keep, cols, vt_data),
    })
}

fn set_entry(m: Matrix, i: usize, j: usize, v: f64) -> Matrix {
    let (r, c) = m.shape();
    let mut data = m.into_vec();
    data[i * c + j] = v;
    Matrix::from_raw(r, c, data)
}

/// One-sided (Hestenes) Jacobi: rotates column pairs of `b` until they are
/// mutually orthogonal, applying the same rotations to `w`.
fn jacobi(b: &mut [Vec<f64>], w: &mut [Vec<f64>], max_sweeps: usize) -> Result<()> {
    let p = b.len();
    if p < 2 {
        return Ok(());
    }
    let tol = f64::EPSILON * (b[0].len() as f64);
    let mut norms: Vec<f64> = b.iter().map(|c| dot(c, c)).collect();
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..p - 1 {
            for j in i + 1..p {
                let alpha = norms[i];
                let beta = norms[j];
                let gamma = dot(&b[i], &b[j]);
                if gamma == 0.0 || gamma.abs() <= tol * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(b, i, j, c, s);
                rotate(w, i, j, c, s);
                norms[i] = dot(&b[i], &b[i]);
                norms[j] = dot(&b[j], &b[j]);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::ConvergenceFailure { sweeps: max_sweeps })
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot,
/// drawn from the standard basis in index order.
pub(crate) fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], len: usize) {
    let mut next_e = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        while next_e < len {
            let mut cand = vec![0.0; len];
            cand[next_e] = 1.0;
            next_e += 1;
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let d = dot(c, &cand);
                    for (x, &y) in cand.iter_mut().zip(c) {
                        *x -= d * y;
                    }
                }
            }
            let nrm = norm(&cand);
            if nrm * nrm >= 0.5 {
                best = Some((nrm, cand));
                break;
            }
            if best.as_ref().map_or(true, |(bn, _)| nrm > *bn) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, mut cand) = best.expect("basis completion ran out of candidates");
        cand.iter_mut().for_each(|x| *x /= nrm);
        cols[slot] = Some(cand);
    }
}
