//! Style subspace construction and the hard/soft null-space projections.
//!
//! Every projector acts on the input side of an update: the content update
//! `ΔW_c` (m×n) becomes `ΔW_c·(I − c·V_k·V_kᵀ)` with `V_k` (n×k) spanning the
//! style adapter's principal right-singular directions. Applied to the
//! factored form this only touches the down-factor: `A_c ← A_c − c·(A_c·V_k)·V_kᵀ`.
//! `c = 1` is the hard projection and `c = μ/(1+μ)` the soft one, which is
//! the closed form of `(I + μ·V_k·V_kᵀ)⁻¹`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{thin_qr, thin_svd_with, LowRankUpdate, Matrix, SvdOptions, DEFAULT_RANK_TOL};

/// Tolerance used when validating a caller-supplied orthonormal basis.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// How many principal directions to protect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SubspaceRank {
    /// All directions of the style adapter (its rank).
    #[default]
    Full,
    /// The `k` leading directions.
    Top(usize),
}

impl core::fmt::Display for SubspaceRank {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SubspaceRank::Full => f.write_str("full"),
            SubspaceRank::Top(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SubspaceMethod {
    /// Top right-singular vectors of the dense style update.
    #[default]
    Svd,
    /// Thin QR of the transposed style down-factor. Spans the same space when
    /// the style factors have full rank, at `O(n·r²)` cost.
    Qr,
}

impl core::fmt::Display for SubspaceMethod {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            SubspaceMethod::Svd => "svd",
            SubspaceMethod::Qr => "qr",
        })
    }
}

/// Orthonormal basis (n×k) of the protected style directions.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleSubspace {
    basis: Matrix,
    singular_values: Vec<f64>,
    source_rank: usize,
    method: SubspaceMethod,
}

impl StyleSubspace {
    /// Wraps an externally built basis after checking `basisᵀ·basis = I`.
    pub fn from_basis(basis: Matrix, source_rank: usize) -> Result<Self> {
        let k = basis.cols();
        if k > basis.rows() || k > source_rank {
            return Err(Error::SubspaceRankTooLarge {
                requested: k,
                available: basis.rows().min(source_rank),
            });
        }
        let gram = basis.t_mul(&basis);
        if gram.sub(&Matrix::identity(k))?.frob_norm() > ORTHONORMAL_TOL {
            return Err(Error::InvalidConfig("basis columns are not orthonormal"));
        }
        Ok(Self {
            basis,
            singular_values: Vec::new(),
            source_rank,
            method: SubspaceMethod::Qr,
        })
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Empty for QR-built subspaces.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn source_rank(&self) -> usize {
        self.source_rank
    }

    pub fn method(&self) -> SubspaceMethod {
        self.method
    }

    /// Number of protected directions.
    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    /// Ambient (input) dimension.
    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    /// Dense `V_k·V_kᵀ` (n×n).
    pub fn projector(&self) -> Matrix {
        self.basis.mul_t(&self.basis)
    }

    /// Dense `I − V_k·V_kᵀ` (n×n).
    pub fn null_projector(&self) -> Matrix {
        attenuation_operator(&self.basis, 1.0)
    }
}

/// Merge mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MergeMode {
    /// `a·ΔW_c + b·ΔW_s`.
    Direct,
    /// `ΔW_s + ΔW_c·(I − V_k·V_kᵀ)`.
    Hard,
    /// `ΔW_s + ΔW_c·(I − μ/(1+μ)·V_k·V_kᵀ)`.
    #[default]
    Soft,
}

impl core::fmt::Display for MergeMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            MergeMode::Direct => "direct",
            MergeMode::Hard => "hard",
            MergeMode::Soft => "soft",
        })
    }
}

/// Soft strength used when none is given.
pub const DEFAULT_MU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProjectionConfig {
    pub mode: MergeMode,
    /// Soft strength, ignored unless `mode` is soft.
    pub mu: f64,
    /// Ignored in direct mode.
    pub k: SubspaceRank,
    /// `(a, b)` weights on (content, style), direct mode only.
    pub direct_weights: (f64, f64),
    pub method: SubspaceMethod,
    /// Relative singular value threshold for the SVD path's numerical rank.
    pub rank_tol: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            mode: MergeMode::Soft,
            mu: DEFAULT_MU,
            k: SubspaceRank::Full,
            direct_weights: (1.0, 1.0),
            method: SubspaceMethod::Svd,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

impl ProjectionConfig {
    pub fn direct(a: f64, b: f64) -> Self {
        Self {
            mode: MergeMode::Direct,
            direct_weights: (a, b),
            ..Self::default()
        }
    }

    pub fn hard() -> Self {
        Self {
            mode: MergeMode::Hard,
            ..Self::default()
        }
    }

    pub fn soft(mu: f64) -> Self {
        Self {
            mode: MergeMode::Soft,
            mu,
            ..Self::default()
        }
    }

    pub fn with_k(mut self, k: SubspaceRank) -> Self {
        self.k = k;
        self
    }

    pub fn with_method(mut self, method: SubspaceMethod) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == MergeMode::Soft {
            validate_mu(self.mu)?;
        }
        if self.mode == MergeMode::Direct {
            let (a, b) = self.direct_weights;
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidConfig("direct weights must be finite"));
            }
        } else if self.k == SubspaceRank::Top(0) {
            return Err(Error::ZeroSubspaceRank);
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::InvalidConfig("rank tolerance must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Factor removed from the in-subspace component: 1 for hard,
    /// `μ/(1+μ)` for soft, 0 for direct.
    pub fn attenuation(&self) -> f64 {
        match self.mode {
            MergeMode::Direct => 0.0,
            MergeMode::Hard => 1.0,
            MergeMode::Soft => soft_factor(self.mu),
        }
    }

    /// Style subspace under this configuration. Direct mode uses all directions.
    pub fn subspace(&self, style: &LowRankUpdate) -> Result<StyleSubspace> {
        let k = if self.mode == MergeMode::Direct {
            SubspaceRank::Full
        } else {
            self.k
        };
        match self.method {
            SubspaceMethod::Svd => subspace_svd_with_tol(style, k, self.rank_tol),
            SubspaceMethod::Qr => subspace_qr(style, k),
        }
    }

    /// Projects the content update according to the mode (direct returns it unchanged).
    pub fn project(&self, content: &LowRankUpdate, sub: &StyleSubspace) -> Result<LowRankUpdate> {
        match self.mode {
            MergeMode::Direct => Ok(content.clone()),
            MergeMode::Hard => hard_project(content, sub),
            MergeMode::Soft => soft_project(content, sub, self.mu),
        }
    }

    /// Compact single-line description, stable across runs.
    pub fn summary(&self) -> String {
        match self.mode {
            MergeMode::Direct => {
                let (a, b) = self.direct_weights;
                format!("mode=direct a={a} b={b}")
            }
            MergeMode::Hard => format!("mode=hard k={} basis={} rank_tol={:e}", self.k, self.method, self.rank_tol),
            MergeMode::Soft => format!(
                "mode=soft mu={} k={} basis={} rank_tol={:e}",
                self.mu, self.k, self.method, self.rank_tol
            ),
        }
    }
}

pub fn validate_mu(mu: f64) -> Result<()> {
    if mu.is_finite() && mu >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidMu(mu))
    }
}

/// `μ/(1+μ)`.
pub fn soft_factor(mu: f64) -> f64 {
    mu / (1.0 + mu)
}

/// Top-`k` right singular vectors of the dense style update.
pub fn subspace_svd(style: &LowRankUpdate, k: SubspaceRank) -> Result<StyleSubspace> {
    subspace_svd_with_tol(style, k, DEFAULT_RANK_TOL)
}

/// As [`subspace_svd`] with an explicit numerical-rank tolerance.
///
/// `Full` resolves to the style rank, clamped to the numerical rank when the
/// adapter is rank deficient. An explicit `Top(k)` beyond the numerical rank
/// is an error.
pub fn subspace_svd_with_tol(style: &LowRankUpdate, k: SubspaceRank, rank_tol: f64) -> Result<StyleSubspace> {
    if k == SubspaceRank::Top(0) {
        return Err(Error::ZeroSubspaceRank);
    }
    let svd = thin_svd_with(style.dense(), &SvdOptions::numerical_rank(rank_tol))?;
    let available = if svd.sigma[0] == 0.0 {
        0
    } else {
        svd.rank().min(style.rank())
    };
    let k = match k {
        SubspaceRank::Full => available,
        SubspaceRank::Top(k) => k,
    };
    if k == 0 || k > available {
        return Err(Error::SubspaceRankTooLarge {
            requested: k.max(style.rank()),
            available,
        });
    }
    Ok(StyleSubspace {
        basis: svd.vt.row_range(0, k).transpose(),
        singular_values: svd.sigma[..k].to_vec(),
        source_rank: style.rank(),
        method: SubspaceMethod::Svd,
    })
}

/// Orthonormal basis of `span(A_sᵀ)` from a thin QR of the style down-factor.
pub fn subspace_qr(style: &LowRankUpdate, k: SubspaceRank) -> Result<StyleSubspace> {
    let rank = style.rank();
    match k {
        SubspaceRank::Top(0) => return Err(Error::ZeroSubspaceRank),
        SubspaceRank::Top(k) if k != rank => {
            return Err(Error::QrNeedsFullRank { requested: k, rank });
        }
        _ => {}
    }
    if style.scale() == 0.0 {
        return Err(Error::ZeroStyle);
    }
    let qr = thin_qr(&style.down().transpose())?;
    Ok(StyleSubspace {
        basis: qr.q,
        singular_values: Vec::new(),
        source_rank: rank,
        method: SubspaceMethod::Qr,
    })
}

pub fn subspace(style: &LowRankUpdate, k: SubspaceRank, method: SubspaceMethod) -> Result<StyleSubspace> {
    match method {
        SubspaceMethod::Svd => subspace_svd(style, k),
        SubspaceMethod::Qr => subspace_qr(style, k),
    }
}

fn check_dims(content: &LowRankUpdate, sub: &StyleSubspace) -> Result<()> {
    if content.cols() != sub.dim() {
        return Err(Error::ShapeMismatch {
            op: "projection",
            left: content.shape(),
            right: sub.basis.shape(),
        });
    }
    Ok(())
}

/// `A ← A − c·(A·V)·Vᵀ` on the down-factor.
fn attenuate_down(content: &LowRankUpdate, sub: &StyleSubspace, c: f64) -> LowRankUpdate {
    if c == 0.0 {
        return content.clone();
    }
    let down = content.down();
    let coeff = down.mul(&sub.basis);
    let correction = coeff.mul_t(&sub.basis);
    let data = down
        .as_slice()
        .iter()
        .zip(correction.as_slice())
        .map(|(a, p)| a - c * p)
        .collect();
    content.with_down(Matrix::from_raw(down.rows(), down.cols(), data))
}

/// `ΔW_c·(I − V_k·V_kᵀ)`, factored: same up-factor, rank and scale.
pub fn hard_project(content: &LowRankUpdate, sub: &StyleSubspace) -> Result<LowRankUpdate> {
    check_dims(content, sub)?;
    Ok(attenuate_down(content, sub, 1.0))
}

/// `ΔW_c·(I − μ/(1+μ)·V_k·V_kᵀ)`. `μ = 0` returns the content unchanged.
pub fn soft_project(content: &LowRankUpdate, sub: &StyleSubspace, mu: f64) -> Result<LowRankUpdate> {
    validate_mu(mu)?;
    check_dims(content, sub)?;
    Ok(attenuate_down(content, sub, soft_factor(mu)))
}

fn attenuation_operator(basis: &Matrix, c: f64) -> Matrix {
    let n = basis.rows();
    let p = basis.mul_t(basis);
    let data = p
        .as_slice()
        .iter()
        .enumerate()
        .map(|(idx, &v)| if idx / n == idx % n { 1.0 - c * v } else { -c * v })
        .collect();
    Matrix::from_raw(n, n, data)
}

/// `(I + μ·V_k·V_kᵀ)⁻¹ = I − μ/(1+μ)·V_k·V_kᵀ` as a dense symmetric n×n matrix.
pub fn woodbury_inverse(sub: &StyleSubspace, mu: f64) -> Result<Matrix> {
    validate_mu(mu)?;
    Ok(attenuation_operator(&sub.basis, soft_factor(mu)))
}

/// `‖ΔW·V_k‖_F²`: energy of the update inside the style subspace.
pub fn interference_energy(update: &LowRankUpdate, sub: &StyleSubspace) -> Result<f64> {
    check_dims(update, sub)?;
    let coeff = update.down().mul(&sub.basis);
    let inside = update.up().mul(&coeff);
    Ok(update.scale() * update.scale() * inside.frob_norm_sq())
}

/// `‖V₁V₁ᵀ − V₂V₂ᵀ‖_F` without forming either n×n projector:
/// `‖P₁ − P₂‖_F² = ‖(I − P₂)V₁‖_F² + ‖(I − P₁)V₂‖_F²`.
pub fn projector_distance(a: &StyleSubspace, b: &StyleSubspace) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "projector_distance",
            left: a.basis.shape(),
            right: b.basis.shape(),
        });
    }
    let residual = |x: &Matrix, y: &Matrix| -> f64 {
        // (I − YYᵀ)X = X − Y(YᵀX)
        let coeff = y.t_mul(x);
        x.sub(&y.mul(&coeff)).map(|m| m.frob_norm_sq()).unwrap_or(f64::NAN)
    };
    Ok(libm::sqrt(residual(&a.basis, &b.basis) + residual(&b.basis, &a.basis)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn update(up: &[&[f64]], down: &[&[f64]]) -> LowRankUpdate {
        LowRankUpdate::new(Matrix::from_rows(up).unwrap(), Matrix::from_rows(down).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn rank_one_style_direction() {
        let style = update(&[&[1.0], &[1.0]], &[&[1.0, 0.0, 0.0]]);
        let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
        assert_eq!(sub.k(), 1);
        assert_eq!(sub.basis(), &Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap());
        assert!((sub.singular_values()[0] - libm::sqrt(2.0)).abs() < 1e-15);
    }

    #[test]
    fn scaled_axes_are_ordered_by_scale() {
        // A rows are 2·e₁, 5·e₃, 3·e₀ in R⁴, B has orthonormal columns.
        let style = update(
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]],
            &[&[0.0, 2.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 5.0], &[3.0, 0.0, 0.0, 0.0]],
        );
        let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
        assert_eq!(sub.singular_values(), &[5.0, 3.0, 2.0]);
        let axes = [3, 0, 1];
        for (col, &axis) in axes.iter().enumerate() {
            for i in 0..4 {
                let want = if i == axis { 1.0 } else { 0.0 };
                assert_eq!(sub.basis().get(i, col), want);
            }
        }
        let top2 = subspace_svd(&style, SubspaceRank::Top(2)).unwrap();
        assert_eq!(top2.k(), 2);
    }

    #[test]
    fn too_many_directions_is_an_error() {
        let style = update(&[&[1.0], &[1.0]], &[&[1.0, 0.0, 0.0]]);
        assert_eq!(
            subspace_svd(&style, SubspaceRank::Top(2)),
            Err(Error::SubspaceRankTooLarge { requested: 2, available: 1 })
        );
        assert_eq!(subspace_svd(&style, SubspaceRank::Top(0)), Err(Error::ZeroSubspaceRank));
    }

    #[test]
    fn qr_path_restrictions() {
        let style = update(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(
            subspace_qr(&style, SubspaceRank::Top(1)),
            Err(Error::QrNeedsFullRank { requested: 1, rank: 2 })
        );
        let sub = subspace_qr(&style, SubspaceRank::Top(2)).unwrap();
        assert_eq!(sub.basis(), &style.down().transpose());
        assert!(sub.singular_values().is_empty());

        let dup = update(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 2.0, 0.0], &[1.0, 2.0, 0.0]]);
        assert!(matches!(
            subspace_qr(&dup, SubspaceRank::Full),
            Err(Error::RankDeficient { column: 1, .. })
        ));
    }

    #[test]
    fn self_projection_annihilates() {
        let style = update(
            &[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]],
            &[&[1.0, 0.0, 2.0, -1.0], &[0.0, 1.0, 1.0, 1.0]],
        );
        let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
        let out = hard_project(&style, &sub).unwrap();
        assert!(out.dense().frob_norm() <= 1e-10 * style.dense().frob_norm());
        assert_eq!(out.up(), style.up());
    }

    #[test]
    fn orthogonal_content_is_untouched() {
        let style = update(&[&[1.0], &[0.0]], &[&[1.0, 0.0, 0.0]]);
        let content = update(&[&[2.0], &[1.0]], &[&[0.0, 3.0, -1.0]]);
        let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
        assert_eq!(hard_project(&content, &sub).unwrap(), content);
        assert_eq!(interference_energy(&content, &sub).unwrap(), 0.0);
    }

    #[test]
    fn soft_limits_and_validation() {
        let style = update(&[&[1.0], &[0.0]], &[&[1.0, 1.0, 0.0]]);
        let content = update(&[&[2.0], &[1.0]], &[&[1.0, 3.0, -1.0]]);
        let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
        assert_eq!(soft_project(&content, &sub, 0.0).unwrap(), content);
        assert_eq!(soft_project(&content, &sub, -1.0), Err(Error::InvalidMu(-1.0)));
        assert!(soft_project(&content, &sub, f64::INFINITY).is_err());
        let e0 = interference_energy(&content, &sub).unwrap();
        let e1 = interference_energy(&soft_project(&content, &sub, 1.0).unwrap(), &sub).unwrap();
        assert!((e1 - e0 / 4.0).abs() < 1e-12 * e0);
    }

    #[test]
    fn fully_contained_update_energy_is_total() {
        let style = update(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let content = update(&[&[2.0], &[1.0]], &[&[1.0, -3.0, 0.0]]);
        let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
        let e = interference_energy(&content, &sub).unwrap();
        assert!((e - content.dense().frob_norm_sq()).abs() < 1e-12);
    }

    #[test]
    fn woodbury_zero_is_identity() {
        let style = update(&[&[1.0], &[0.0]], &[&[1.0, 1.0, 0.0]]);
        let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
        assert_eq!(woodbury_inverse(&sub, 0.0).unwrap(), Matrix::identity(3));
        let w = woodbury_inverse(&sub, 1e12).unwrap();
        assert!(w.sub(&sub.null_projector()).unwrap().frob_norm() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(ProjectionConfig::soft(-0.1).validate().is_err());
        assert!(ProjectionConfig::soft(f64::NAN).validate().is_err());
        assert!(ProjectionConfig::hard().validate().is_ok());
        let mut hard = ProjectionConfig::hard();
        hard.mu = f64::NAN;
        assert!(hard.validate().is_ok(), "hard ignores mu");
        assert!(ProjectionConfig::direct(f64::INFINITY, 1.0).validate().is_err());
        assert_eq!(ProjectionConfig::hard().with_k(SubspaceRank::Top(0)).validate(), Err(Error::ZeroSubspaceRank));
        assert_eq!(ProjectionConfig::soft(0.5).attenuation(), 1.0 / 3.0);
        assert_eq!(ProjectionConfig::default().summary(), "mode=soft mu=0.5 k=full basis=svd rank_tol=1e-10");
    }

    #[test]
    fn from_basis_checks_orthonormality() {
        let bad = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!(StyleSubspace::from_basis(bad, 2).is_err());
        let ok = Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
        let sub = StyleSubspace::from_basis(ok, 4).unwrap();
        assert_eq!(sub.projector().as_slice(), &vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0][..]);
    }
}
