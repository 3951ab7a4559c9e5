//! Seeded synthetic adapters for checks and benchmarks.

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

/// Gaussian factors, down-factor scaled by `1/sqrt(r)`, scale one.
pub fn random_update(rng: &mut StdRng, m: usize, n: usize, r: usize) -> LowRankUpdate {
    let up = gaussian(rng, m, r);
    let down = gaussian(rng, r, n).scaled(1.0 / (r as f64).sqrt());
    LowRankUpdate::new(up, down, 1.0).expect("conforming random factors")
}

/// Independent `(content, style)` pair drawn from one seed.
pub fn random_pair(seed: u64, m: usize, n: usize, r: usize) -> (LowRankUpdate, LowRankUpdate) {
    let mut g = rng(seed);
    let content = random_update(&mut g, m, n, r);
    let style = random_update(&mut g, m, n, r);
    (content, style)
}

/// Update with exact singular values `sigma` and random orthonormal singular vectors.
pub fn with_spectrum(seed: u64, m: usize, n: usize, sigma: &[f64]) -> LowRankUpdate {
    let mut g = rng(seed);
    let r = sigma.len();
    let q = |g: &mut StdRng, rows: usize| {
        let a = gaussian(g, rows, r);
        nalgebra::DMatrix::from_row_slice(rows, r, a.as_slice()).qr().q()
    };
    let u = q(&mut g, m);
    let v = q(&mut g, n);
    let up = Matrix::from_fn(m, r, |i, j| u[(i, j)] * sigma[j]);
    let down = Matrix::from_fn(r, n, |i, j| v[(j, i)]);
    LowRankUpdate::new(up, down, 1.0).expect("conforming factors")
}
