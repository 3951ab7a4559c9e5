use alloc::vec::Vec;

use super::matrix::Matrix;
use super::qr::{argmax_abs, householder_qr};
use super::svd::{thin_svd, ThinSvd};
use crate::error::{Error, Result};

/// Factored update `ΔW = scale · up · down` with `up` m×r and `down` r×n.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankUpdate {
    up: Matrix,
    down: Matrix,
    scale: f64,
}

impl LowRankUpdate {
    pub fn new(up: Matrix, down: Matrix, scale: f64) -> Result<Self> {
        if up.cols() != down.rows() {
            return Err(Error::FactorMismatch {
                up_cols: up.cols(),
                down_rows: down.rows(),
            });
        }
        let rank = up.cols();
        if rank > up.rows().min(down.cols()) {
            return Err(Error::RankTooLarge {
                rank,
                rows: up.rows(),
                cols: down.cols(),
            });
        }
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidScale(scale));
        }
        Ok(Self { up, down, scale })
    }

    /// `B` (m×r).
    pub fn up(&self) -> &Matrix {
        &self.up
    }

    /// `A` (r×n).
    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.up.cols()
    }

    /// Output dimension `m`.
    pub fn rows(&self) -> usize {
        self.up.rows()
    }

    /// Input dimension `n`.
    pub fn cols(&self) -> usize {
        self.down.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn dense(&self) -> Matrix {
        let d = self.up.mul(&self.down);
        if self.scale == 1.0 {
            d
        } else {
            d.scaled(self.scale)
        }
    }

    /// `scale · up`; bit-identical to `up` when the scale is one.
    pub fn effective_up(&self) -> Matrix {
        if self.scale == 1.0 {
            self.up.clone()
        } else {
            self.up.scaled(self.scale)
        }
    }

    /// Same update with the scale folded into the up-factor.
    pub fn folded(&self) -> LowRankUpdate {
        LowRankUpdate {
            up: self.effective_up(),
            down: self.down.clone(),
            scale: 1.0,
        }
    }

    /// Replaces the down-factor, keeping `up` and `scale`.
    pub(crate) fn with_down(&self, down: Matrix) -> LowRankUpdate {
        debug_assert_eq!(down.shape(), self.down.shape());
        LowRankUpdate {
            up: self.up.clone(),
            down,
            scale: self.scale,
        }
    }

    /// `‖ΔW‖_F²` from the factors: `s²·Σ (BᵀB) ∘ (AAᵀ)`.
    pub fn frob_norm_sq(&self) -> f64 {
        factored_inner(self, self)
    }

    pub fn frob_norm(&self) -> f64 {
        libm::sqrt(self.frob_norm_sq().max(0.0))
    }

    /// SVD of the dense update computed from the factors, `p = rank`.
    ///
    /// `B = Q_b·R_b`, `Aᵀ = Q_a·R_a`, then the r×r core `s·R_b·R_aᵀ` is
    /// decomposed, so the cost is `O((m + n)·r²)`.
    pub fn factored_svd(&self) -> Result<ThinSvd> {
        let qb = householder_qr(&self.up);
        let qa = householder_qr(&self.down.transpose());
        let core = qb.r.mul_t(&qa.r).scaled(self.scale);
        let small = thin_svd(&core)?;
        let u = qb.q.mul(&small.u);
        let vt = small.vt.mul_t(&qa.q);
        let signs: Vec<f64> = (0..vt.rows())
            .map(|k| {
                let row = vt.row(k);
                if row[argmax_abs(row)] < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ThinSvd {
            u: u.scale_columns(&signs),
            sigma: small.sigma,
            vt: vt.transpose().scale_columns(&signs).transpose(),
        })
    }
}

/// `scale · up · down` as a dense matrix.
pub fn dense(u: &LowRankUpdate) -> Matrix {
    u.dense()
}

/// Frobenius inner product `⟨ΔW₁, ΔW₂⟩` evaluated on the factors.
///
/// # Panics
/// If the two updates have different shapes.
pub fn factored_inner(x: &LowRankUpdate, y: &LowRankUpdate) -> f64 {
    assert_eq!(x.shape(), y.shape(), "factored_inner needs equal shapes");
    let bb = x.up.t_mul(&y.up);
    let aa = x.down.mul_t(&y.down);
    let s: f64 = bb.as_slice().iter().zip(aa.as_slice()).map(|(p, q)| p * q).sum();
    x.scale * y.scale * s
}
