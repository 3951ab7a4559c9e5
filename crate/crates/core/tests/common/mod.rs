#![allow(dead_code)]

use nalgebra::DMatrix;
use nullfuse_core::{LowRankUpdate, Matrix};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Gaussian factors with entries scaled by `1/sqrt(r)`.
pub fn random_update(rng: &mut StdRng, m: usize, n: usize, r: usize) -> LowRankUpdate {
    let s = 1.0 / (r as f64).sqrt();
    let up = gaussian(rng, m, r);
    let down = gaussian(rng, r, n);
    LowRankUpdate::new(up, down.scaled(s), 1.0).unwrap()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Dense `scale·B·A` via nalgebra.
pub fn dense_na(u: &LowRankUpdate) -> DMatrix<f64> {
    to_na(u.up()) * to_na(u.down()) * u.scale()
}

pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Random `n×k` matrix with orthonormal columns.
pub fn random_orthonormal(rng: &mut StdRng, n: usize, k: usize) -> DMatrix<f64> {
    let g = to_na(&gaussian(rng, n, k));
    g.qr().q()
}

/// Leading `k` eigenvectors of a symmetric matrix, as columns.
///
/// Used for singular subspaces of rank-deficient matrices through the Gram
/// matrix, where nalgebra's SVD can return inaccurate vectors.
pub fn top_eigenvectors(sym: DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let eig = sym.symmetric_eigen();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(eig.eigenvectors.nrows(), k, |i, j| eig.eigenvectors[(i, idx[j])])
}
