//! Diagnostics on adapter pairs: spectra, direction perturbation, interference
//! energy before and after projection, and the colinearity residual.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{householder_qr, LowRankUpdate, Matrix};
use crate::linalg::{dot, norm};
use crate::projector::{interference_energy, subspace_svd, MergeMode, ProjectionConfig, SubspaceRank};

/// Singular values of one layer's update, largest first.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpectrumReport {
    pub layer_key: String,
    pub singular_values: Vec<f64>,
    /// Cumulative `Σ_{j≤i} σⱼ² / Σ σ²`; all zero for a zero update.
    pub energy_fractions: Vec<f64>,
    /// Set when every singular value is zero.
    pub degenerate: bool,
}

impl SpectrumReport {
    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.layer_key = key.into();
        self
    }
}

/// Spectrum of the dense update, computed from the factors (`rank` values).
pub fn spectrum(update: &LowRankUpdate) -> Result<SpectrumReport> {
    let sigma = update.factored_svd()?.sigma;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let degenerate = total == 0.0;
    let mut acc = 0.0;
    let mut energy_fractions: Vec<f64> = sigma
        .iter()
        .map(|s| {
            acc += s * s;
            if degenerate {
                0.0
            } else {
                acc / total
            }
        })
        .collect();
    if let (false, Some(last)) = (degenerate, energy_fractions.last_mut()) {
        *last = 1.0;
    }
    Ok(SpectrumReport {
        layer_key: String::new(),
        singular_values: sigma,
        energy_fractions,
        degenerate,
    })
}

/// Standard normal draw (Box–Muller).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Random unit vector orthogonal to every row of `basis` and to `extra`, or
/// `None` when that complement is (numerically) empty.
fn complement_direction(rng: &mut ChaCha8Rng, basis: &Matrix, extra: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = basis.cols();
    let mut w: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let start = norm(&w);
    for _ in 0..2 {
        for q in (0..basis.rows()).map(|i| basis.row(i)).chain(extra.iter().map(Vec::as_slice)) {
            let c = dot(q, &w);
            w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
    }
    let len = norm(&w);
    if len <= 1e-8 * start {
        return None;
    }
    w.iter_mut().for_each(|x| *x /= len);
    Some(w)
}

/// Rebuilds `update` from its SVD with the selected directions perturbed.
///
/// For each `i` in `indices`, `σᵢ ← σᵢ·(1 + ε·ηᵢ)` with `ηᵢ ~ N(0, 1)` and
/// `vᵢ ← cos ε·vᵢ + sin ε·wᵢ`, where `wᵢ` is a random unit vector orthogonal
/// to every right singular vector (and to earlier `w`). Draws happen in
/// ascending index order from a ChaCha8 stream seeded with `seed`. The
/// rotation is skipped when the update already spans the whole input space.
///
/// The result has scale one, `up = U·Σ'` and `down = V'ᵀ`; rows and columns
/// for indices not listed are copied unchanged from the decomposition.
pub fn perturb_directions(update: &LowRankUpdate, indices: &[usize], epsilon: f64, seed: u64) -> Result<LowRankUpdate> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    let rank = update.rank();
    let mut picked = indices.to_vec();
    picked.sort_unstable();
    picked.dedup();
    if let Some(&index) = picked.iter().find(|&&i| i >= rank) {
        return Err(Error::DirectionOutOfRange { index, rank });
    }

    let svd = update.factored_svd()?;
    let mut sigma = svd.sigma.clone();
    let mut vt = svd.vt.clone().into_vec();
    let n = update.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: Vec<Vec<f64>> = Vec::new();
    let (cos, sin) = (libm::cos(epsilon), libm::sin(epsilon));
    for &i in &picked {
        sigma[i] *= 1.0 + epsilon * normal(&mut rng);
        if let Some(w) = complement_direction(&mut rng, &svd.vt, &used) {
            for (v, wj) in vt[i * n..(i + 1) * n].iter_mut().zip(&w) {
                *v = cos * *v + sin * wj;
            }
            used.push(w);
        }
    }
    let up = svd.u.scale_columns(&sigma);
    LowRankUpdate::new(up, Matrix::new(rank, n, vt)?, 1.0)
}

/// Frobenius norm of `up·down` without cancellation-prone Gram sums.
fn product_norm(up: &Matrix, down: &Matrix) -> f64 {
    if up.rows() >= up.cols() {
        householder_qr(up).r.mul(down).frob_norm()
    } else {
        up.mul(down).frob_norm()
    }
}

/// Relative residual of fitting `X = ΔW_c·V_kV_kᵀ` by a multiple of `ΔW_s`:
/// `min_α ‖X − α·ΔW_s‖_F / ‖X‖_F`, with vectorized Frobenius inner products.
///
/// Returns 0 when `X` vanishes (content orthogonal to the style subspace).
pub fn colinearity_test(content: &LowRankUpdate, style: &LowRankUpdate, k: SubspaceRank) -> Result<f64> {
    if content.shape() != style.shape() {
        return Err(Error::ShapeMismatch {
            op: "colinearity_test",
            left: content.shape(),
            right: style.shape(),
        });
    }
    let style = style.folded();
    if style.frob_norm_sq() == 0.0 {
        return Err(Error::ZeroStyle);
    }
    let sub = subspace_svd(&style, k)?;
    let content = content.folded();
    let v = sub.basis();
    let x_down = content.down().mul(v).mul_t(v);
    let x_norm = product_norm(content.up(), &x_down);
    if x_norm <= 1e-12 * content.frob_norm() || x_norm == 0.0 {
        return Ok(0.0);
    }
    let x = LowRankUpdate::new(content.up().clone(), x_down.clone(), 1.0)?;
    let alpha = crate::linalg::factored_inner(&x, &style) / style.frob_norm_sq();
    let up = content.up().hstack(&style.up().scaled(-alpha))?;
    let down = x_down.vstack(style.down())?;
    Ok((product_norm(&up, &down) / x_norm).min(1.0))
}

/// Energy of a content update inside the style subspace before and after projection.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InterferenceReport {
    pub layer_key: String,
    /// `‖ΔW_c·V_k‖_F²`.
    pub content_energy_in_style_subspace: f64,
    /// `‖ΔW_c‖_F²`.
    pub content_total_energy: f64,
    /// In-subspace over total energy, in `[0, 1]`.
    pub ratio: f64,
    /// `‖project(ΔW_c)·V_k‖_F²`.
    pub post_merge_residual: f64,
}

impl InterferenceReport {
    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.layer_key = key.into();
        self
    }

    /// Post-projection residual over the total content energy.
    pub fn normalized_residual(&self) -> f64 {
        if self.content_total_energy == 0.0 {
            0.0
        } else {
            self.post_merge_residual / self.content_total_energy
        }
    }

    /// Post over pre in-subspace energy (1 when nothing was inside).
    pub fn attenuation(&self) -> f64 {
        if self.content_energy_in_style_subspace == 0.0 {
            1.0
        } else {
            self.post_merge_residual / self.content_energy_in_style_subspace
        }
    }

    fn build(pre: f64, total: f64, post: f64) -> Self {
        Self {
            layer_key: String::new(),
            content_energy_in_style_subspace: pre,
            content_total_energy: total,
            ratio: if total == 0.0 { 0.0 } else { (pre / total).clamp(0.0, 1.0) },
            post_merge_residual: post,
        }
    }
}

fn check_pair(op: &'static str, content: &LowRankUpdate, style: &LowRankUpdate) -> Result<()> {
    if content.shape() != style.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: content.shape(),
            right: style.shape(),
        });
    }
    Ok(())
}

/// Interference of `content` with the style subspace under `cfg`.
/// Direct mode measures the full style subspace and leaves the content as is.
pub fn interference_report(content: &LowRankUpdate, style: &LowRankUpdate, cfg: &ProjectionConfig) -> Result<InterferenceReport> {
    cfg.validate()?;
    check_pair("interference_report", content, style)?;
    let sub = cfg.subspace(style)?;
    let pre = interference_energy(content, &sub)?;
    let post = match cfg.mode {
        MergeMode::Direct => pre,
        _ => interference_energy(&cfg.project(content, &sub)?, &sub)?,
    };
    Ok(InterferenceReport::build(pre, content.frob_norm_sq(), post))
}

/// Right-space interference after projecting the content on the input side
/// (`ΔW_c·(I − c·V_kV_kᵀ)`) and, for comparison, on the output side
/// (`(I − c·U_kU_kᵀ)·ΔW_c` with `U_k` the style's top left singular vectors).
/// `c` is the attenuation of `cfg` (1 for hard, 0 for direct).
pub fn compare_uv_projection(
    content: &LowRankUpdate,
    style: &LowRankUpdate,
    cfg: &ProjectionConfig,
) -> Result<(InterferenceReport, InterferenceReport)> {
    let v_report = interference_report(content, style, cfg)?;
    let sub = cfg.subspace(style)?;
    let c = cfg.attenuation();
    let post_u = if c == 0.0 {
        v_report.content_energy_in_style_subspace
    } else {
        let u = style.factored_svd()?.u.columns(0, sub.k());
        let up = content.up();
        let correction = u.mul(&u.t_mul(up));
        let data = up.as_slice().iter().zip(correction.as_slice()).map(|(b, p)| b - c * p).collect();
        let projected = LowRankUpdate::new(Matrix::new(up.rows(), up.cols(), data)?, content.down().clone(), content.scale())?;
        interference_energy(&projected, &sub)?
    };
    let u_report = InterferenceReport::build(
        v_report.content_energy_in_style_subspace,
        v_report.content_total_energy,
        post_u,
    );
    Ok((v_report, u_report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn diag_update(sigma: &[f64], m: usize, n: usize) -> LowRankUpdate {
        let r = sigma.len();
        let up = Matrix::from_fn(m, r, |i, j| if i == j { sigma[j] } else { 0.0 });
        let down = Matrix::from_fn(r, n, |i, j| (i == j) as u8 as f64);
        LowRankUpdate::new(up, down, 1.0).unwrap()
    }

    #[test]
    fn spectrum_of_known_diagonal() {
        let s = [8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let rep = spectrum(&diag_update(&s, 12, 10)).unwrap();
        assert_eq!(rep.singular_values.len(), 8);
        for (a, b) in rep.singular_values.iter().zip(s) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(*rep.energy_fractions.last().unwrap(), 1.0);
        assert!(rep.energy_fractions.windows(2).all(|w| w[0] <= w[1]));
        assert!(!rep.degenerate);
    }

    #[test]
    fn zero_spectrum_is_degenerate() {
        let z = LowRankUpdate::new(Matrix::zeros(4, 2), Matrix::zeros(2, 3), 1.0).unwrap();
        let rep = spectrum(&z).unwrap().with_key("x");
        assert!(rep.degenerate);
        assert_eq!(rep.singular_values, vec![0.0, 0.0]);
        assert_eq!(rep.energy_fractions, vec![0.0, 0.0]);
        assert_eq!(rep.layer_key, "x");
    }

    #[test]
    fn perturbation_zero_epsilon_is_identity() {
        let u = diag_update(&[3.0, 2.0, 1.0], 5, 6);
        let p = perturb_directions(&u, &[0, 1, 2], 0.0, 9).unwrap();
        assert!(p.dense().sub(&u.dense()).unwrap().frob_norm() < 1e-12);
    }

    #[test]
    fn perturbation_ratio_tracks_sigma() {
        let s = [8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let u = diag_update(&s, 16, 16);
        let d = u.dense();
        let change = |i| perturb_directions(&u, &[i], 0.1, 3).unwrap().dense().sub(&d).unwrap().frob_norm();
        let ratio = change(0) / change(7);
        assert!((ratio - 8.0).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn perturbation_rejects_bad_input() {
        let u = diag_update(&[1.0], 2, 2);
        assert_eq!(perturb_directions(&u, &[1], 0.1, 0), Err(Error::DirectionOutOfRange { index: 1, rank: 1 }));
        assert_eq!(perturb_directions(&u, &[0], -0.1, 0), Err(Error::InvalidEpsilon(-0.1)));
    }

    #[test]
    fn colinearity_edge_cases() {
        let s = diag_update(&[2.0, 1.0], 4, 5);
        assert!(colinearity_test(&s, &s, SubspaceRank::Full).unwrap() < 1e-12);
        let orth = LowRankUpdate::new(
            Matrix::from_fn(4, 1, |i, _| i as f64),
            Matrix::from_fn(1, 5, |_, j| (j == 4) as u8 as f64),
            1.0,
        )
        .unwrap();
        assert_eq!(colinearity_test(&orth, &s, SubspaceRank::Full).unwrap(), 0.0);
        let zero = LowRankUpdate::new(Matrix::zeros(4, 1), Matrix::zeros(1, 5), 1.0).unwrap();
        assert_eq!(colinearity_test(&s, &zero, SubspaceRank::Full), Err(Error::ZeroStyle));
    }

    #[test]
    fn interference_modes() {
        let style = diag_update(&[2.0, 1.0], 4, 5);
        let content = LowRankUpdate::new(
            Matrix::from_fn(4, 1, |i, _| 1.0 + i as f64),
            Matrix::from_rows(&[[1.0, 1.0, 1.0, 0.0, 1.0]]).unwrap(),
            0.5,
        )
        .unwrap();
        let hard = interference_report(&content, &style, &ProjectionConfig::hard()).unwrap();
        assert!(hard.normalized_residual() <= 1e-16);
        assert!((hard.ratio - 0.5).abs() < 1e-12);
        let soft = interference_report(&content, &style, &ProjectionConfig::soft(0.5)).unwrap();
        assert!((soft.attenuation() - 1.0 / 2.25).abs() < 1e-12);
        let direct = interference_report(&content, &style, &ProjectionConfig::direct(1.0, 1.0)).unwrap();
        assert_eq!(direct.post_merge_residual, direct.content_energy_in_style_subspace);
    }

    #[test]
    fn uv_comparison_self_and_zero_mu() {
        let style = diag_update(&[2.0, 1.0], 4, 5);
        let (v, u) = compare_uv_projection(&style, &style, &ProjectionConfig::hard()).unwrap();
        assert!(v.normalized_residual() < 1e-16);
        assert!(u.normalized_residual() < 1e-16);
        let (v, u) = compare_uv_projection(&style, &style, &ProjectionConfig::soft(0.0)).unwrap();
        assert_eq!(v, u);
        assert_eq!(v.post_merge_residual, v.content_energy_in_style_subspace);
    }
}
