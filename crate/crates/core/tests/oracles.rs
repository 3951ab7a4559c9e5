//! Results checked against independent dense computations (nalgebra, naive loops).

mod common;

use common::*;
use nalgebra::DMatrix;
use nullfuse_core::analysis::{colinearity_test, compare_uv_projection, interference_report, perturb_directions, spectrum};
use nullfuse_core::fusion::{apply_to_base, merge_direct, merge_np};
use nullfuse_core::linalg::{thin_qr, thin_svd, thin_svd_with, SvdOptions};
use nullfuse_core::projector::{hard_project, interference_energy, projector_distance, subspace_qr, subspace_svd, woodbury_inverse};
use nullfuse_core::{LowRankUpdate, ProjectionConfig, SubspaceRank};

#[test]
fn svd_matches_eigenvalues_of_gram() {
    let mut r = rng(11);
    let m = gaussian(&mut r, 64, 64);
    let svd = thin_svd(&m).unwrap();
    let a = to_na(&m);
    let mut eig: Vec<f64> = (a.transpose() * &a).symmetric_eigen().eigenvalues.iter().map(|e| e.max(0.0).sqrt()).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    for (s, e) in svd.sigma.iter().zip(&eig) {
        assert!((s - e).abs() <= 1e-10 * eig[0], "{s} vs {e}");
    }
    assert!(rel(&to_na(&svd.reconstruct()), &a) < 1e-13);
    let u = to_na(&svd.u);
    let v = to_na(&svd.v());
    assert!((u.transpose() * &u - DMatrix::identity(64, 64)).norm() < 1e-12);
    assert!((v.transpose() * &v - DMatrix::identity(64, 64)).norm() < 1e-12);
}

#[test]
fn rectangular_svd_matches_nalgebra() {
    let mut r = rng(12);
    for (rows, cols) in [(40, 70), (70, 40), (1, 9), (9, 1)] {
        let m = gaussian(&mut r, rows, cols);
        let ours = thin_svd(&m).unwrap();
        let theirs = to_na(&m).svd(false, false).singular_values;
        let mut theirs: Vec<f64> = theirs.iter().copied().collect();
        theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert_eq!(ours.rank(), rows.min(cols));
        for (s, t) in ours.sigma.iter().zip(&theirs) {
            assert!((s - t).abs() <= 1e-12 * theirs[0]);
        }
        assert!(rel(&to_na(&ours.reconstruct()), &to_na(&m)) < 1e-13);
    }
}

#[test]
fn truncated_svd_of_low_rank_dense() {
    let mut r = rng(13);
    let u = random_update(&mut r, 300, 200, 8);
    let svd = thin_svd_with(u.dense(), &SvdOptions::numerical_rank(1e-10)).unwrap();
    assert_eq!(svd.rank(), 8);
    let full = to_na(&u.dense()).svd(false, false).singular_values;
    let mut full: Vec<f64> = full.iter().copied().collect();
    full.sort_by(|x, y| y.partial_cmp(x).unwrap());
    for (s, t) in svd.sigma.iter().zip(&full) {
        assert!((s - t).abs() <= 1e-11 * full[0]);
    }
    assert!(rel(&to_na(&svd.reconstruct()), &dense_na(&u)) < 1e-12);
}

#[test]
fn factored_svd_matches_dense_svd() {
    let mut r = rng(14);
    let u = random_update(&mut r, 96, 80, 8);
    let f = u.factored_svd().unwrap();
    let d = thin_svd_with(u.dense(), &SvdOptions::numerical_rank(1e-10)).unwrap();
    for (a, b) in f.sigma.iter().zip(&d.sigma) {
        assert!((a - b).abs() <= 1e-12 * d.sigma[0]);
    }
    // Same sign convention on v, so the factors agree directly.
    assert!((to_na(&f.vt) - to_na(&d.vt)).norm() < 1e-9);
    assert!(rel(&to_na(&f.reconstruct()), &dense_na(&u)) < 1e-13);
}

#[test]
fn qr_matches_nalgebra_projector() {
    let mut r = rng(15);
    let m = gaussian(&mut r, 50, 6);
    let ours = thin_qr(&m).unwrap();
    let q_na = to_na(&m).qr().q();
    let p_ours = to_na(&ours.q) * to_na(&ours.q).transpose();
    let p_na = &q_na * q_na.transpose();
    assert!((p_ours - p_na).norm() < 1e-12);
    assert!(rel(&to_na(&ours.q.matmul(&ours.r).unwrap()), &to_na(&m)) < 1e-14);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(16);
    let a = gaussian(&mut r, 17, 23);
    let b = gaussian(&mut r, 23, 9);
    let c = a.matmul(&b).unwrap();
    for i in 0..17 {
        for j in 0..9 {
            let mut acc = 0.0;
            for k in 0..23 {
                acc += a.get(i, k) * b.get(k, j);
            }
            assert!((c.get(i, j) - acc).abs() < 1e-12);
        }
    }
}

fn kahan_sum_sq(xs: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in xs {
        let y = x * x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[test]
fn frobenius_norms_match_compensated_sum() {
    let mut r = rng(17);
    let u = random_update(&mut r, 120, 90, 8).folded();
    let dense = u.dense();
    let oracle = kahan_sum_sq(dense.as_slice());
    assert!((dense.frob_norm_sq() - oracle).abs() <= 1e-12 * oracle);
    assert!((u.frob_norm_sq() - oracle).abs() <= 1e-12 * oracle);
}

#[test]
fn woodbury_matches_lu_inverse() {
    let mut r = rng(18);
    let style = random_update(&mut r, 40, 48, 8);
    let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
    let v = to_na(sub.basis());
    let p = &v * v.transpose();
    for mu in [0.1, 0.5, 1.0, 10.0] {
        let dense = (DMatrix::identity(48, 48) + &p * mu).lu().try_inverse().unwrap();
        let closed = to_na(&woodbury_inverse(&sub, mu).unwrap());
        assert!(rel(&closed, &dense) < 1e-12);
    }
}

#[test]
fn hard_projection_matches_dense_product() {
    let mut r = rng(19);
    let content = random_update(&mut r, 64, 64, 8);
    let style = random_update(&mut r, 64, 64, 8);
    let sub = subspace_svd(&style, SubspaceRank::Full).unwrap();
    let v = to_na(sub.basis());
    let oracle = dense_na(&content) * (DMatrix::identity(64, 64) - &v * v.transpose());
    let ours = dense_na(&hard_project(&content, &sub).unwrap());
    assert!(rel(&ours, &oracle) < 1e-12);
    // Right singular vectors of the dense style via nalgebra span the same space.
    let d = dense_na(&style);
    let v_na = top_eigenvectors(d.transpose() * &d, 8);
    assert!((&v * v.transpose() - &v_na * v_na.transpose()).norm() < 1e-10);
}

#[test]
fn svd_and_qr_projectors_agree_with_dense_distance() {
    let mut r = rng(20);
    let style = random_update(&mut r, 80, 120, 8);
    let a = subspace_svd(&style, SubspaceRank::Full).unwrap();
    let b = subspace_qr(&style, SubspaceRank::Full).unwrap();
    let pa = to_na(&a.projector());
    let pb = to_na(&b.projector());
    let dense = (&pa - &pb).norm();
    assert!(dense < 1e-10);
    assert!((projector_distance(&a, &b).unwrap() - dense).abs() < 1e-10);

    let other = subspace_svd(&random_update(&mut r, 80, 120, 8), SubspaceRank::Full).unwrap();
    let dense = (&pa - to_na(&other.projector())).norm();
    assert!((projector_distance(&a, &other).unwrap() - dense).abs() < 1e-12 * dense);
}

#[test]
fn direct_merge_matches_dense_sum() {
    let mut r = rng(21);
    let c = random_update(&mut r, 50, 60, 8);
    let s = random_update(&mut r, 50, 60, 8);
    let m = merge_direct(&c, &s, 0.3, 0.7).unwrap();
    let oracle = dense_na(&c) * 0.3 + dense_na(&s) * 0.7;
    assert!((to_na(&m.dense()) - &oracle).norm() <= 1e-12 * oracle.norm());
    assert_eq!(m.rank(), 16);
}

#[test]
fn soft_merge_attenuates_content_energy() {
    let mut r = rng(22);
    let c = random_update(&mut r, 64, 64, 8);
    let s = random_update(&mut r, 64, 64, 8);
    let m = merge_np(&c, &s, &ProjectionConfig::soft(0.5)).unwrap();
    let sub = subspace_svd(&s, SubspaceRank::Full).unwrap();
    // Merged minus the style part, computed densely.
    let content_part = to_na(&m.dense()) - dense_na(&s);
    let v = to_na(sub.basis());
    let after = (content_part * &v).norm_squared();
    let before = interference_energy(&c, &sub).unwrap();
    let expected = before / 2.25;
    assert!((after - expected).abs() <= 1e-9 * expected);
    assert_eq!(m.rank(), 16);
}

#[test]
fn merged_output_matches_style_inside_subspace() {
    let mut r = rng(23);
    let c = random_update(&mut r, 48, 72, 8);
    let s = random_update(&mut r, 48, 72, 8);
    let m = merge_np(&c, &s, &ProjectionConfig::hard()).unwrap();
    let sub = subspace_svd(&s, SubspaceRank::Full).unwrap();
    let v = to_na(sub.basis());
    let lhs = to_na(&m.dense()) * &v;
    let rhs = dense_na(&s) * &v;
    assert!((&lhs - &rhs).norm() <= 1e-9 * rhs.norm());
    for _ in 0..5 {
        let x = to_na(&gaussian(&mut r, 72, 1));
        let px = &v * (v.transpose() * &x);
        let a = to_na(&m.dense()) * &px;
        let b = dense_na(&s) * &px;
        assert!((&a - &b).norm() <= 1e-9 * b.norm());
    }
}

#[test]
fn base_application_matches_elementwise_sum() {
    let mut r = rng(24);
    let c = random_update(&mut r, 20, 30, 4);
    let s = random_update(&mut r, 20, 30, 4);
    let m = merge_np(&c, &s, &ProjectionConfig::default()).unwrap();
    let base = gaussian(&mut r, 20, 30);
    let w = apply_to_base(&base, &m).unwrap();
    let d = m.dense();
    for i in 0..20 {
        for j in 0..30 {
            assert_eq!(w.get(i, j), base.get(i, j) + d.get(i, j));
        }
    }
}

#[test]
fn spectrum_recovers_constructed_singular_values() {
    let mut r = rng(25);
    let sigma: Vec<f64> = (1..=8).rev().map(f64::from).collect();
    let u = random_orthonormal(&mut r, 60, 8);
    let v = random_orthonormal(&mut r, 70, 8);
    let up = from_na(&(u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sigma.clone()))));
    let down = from_na(&v.transpose());
    let rep = spectrum(&LowRankUpdate::new(up, down, 1.0).unwrap()).unwrap();
    assert_eq!(rep.singular_values.len(), 8);
    for (a, b) in rep.singular_values.iter().zip(&sigma) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn full_perturbation_moves_every_singular_value() {
    let mut r = rng(26);
    let u = random_update(&mut r, 40, 40, 8);
    let before = spectrum(&u).unwrap().singular_values;
    let p = perturb_directions(&u, &(0..8).collect::<Vec<_>>(), 1.0, 5).unwrap();
    let dense = to_na(&p.dense());
    let mut after: Vec<f64> = dense.svd(false, false).singular_values.iter().copied().collect();
    after.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let mut moved_before = before.clone();
    moved_before.sort_by(|x, y| y.partial_cmp(x).unwrap());
    for (a, b) in after.iter().zip(&moved_before) {
        assert!((a - b).abs() > 1e-6);
    }
}

#[test]
fn perturbation_change_matches_dense_recomputation() {
    let mut r = rng(27);
    let u = random_update(&mut r, 30, 30, 8);
    let svd = u.factored_svd().unwrap();
    let p = perturb_directions(&u, &[2], 0.2, 77).unwrap();
    // Everything but direction 2 is unchanged.
    let delta = to_na(&p.dense()) - dense_na(&u);
    let uu = to_na(&svd.u);
    for i in (0..8).filter(|&i| i != 2) {
        let ui = uu.column(i);
        assert!((ui.transpose() * &delta).norm() < 1e-10);
    }
    assert!(delta.norm() > 1e-3);
}

#[test]
fn colinearity_of_independent_pairs() {
    let mut r = rng(28);
    for _ in 0..10 {
        let c = random_update(&mut r, 64, 64, 8);
        let s = random_update(&mut r, 64, 64, 8);
        let res = colinearity_test(&c, &s, SubspaceRank::Full).unwrap();
        // Dense oracle.
        let sub = subspace_svd(&s, SubspaceRank::Full).unwrap();
        let v = to_na(sub.basis());
        let x = dense_na(&c) * &v * v.transpose();
        let y = dense_na(&s);
        let alpha = x.dot(&y) / y.dot(&y);
        let oracle = (&x - &y * alpha).norm() / x.norm();
        assert!((res - oracle).abs() < 1e-10);
        assert!(res > 0.5);
    }
}

#[test]
fn uv_comparison_matches_dense_projections() {
    let mut r = rng(29);
    let c = random_update(&mut r, 56, 64, 8);
    let s = random_update(&mut r, 56, 64, 8);
    let (v_rep, u_rep) = compare_uv_projection(&c, &s, &ProjectionConfig::hard()).unwrap();
    let sub = subspace_svd(&s, SubspaceRank::Full).unwrap();
    let v = to_na(sub.basis());
    let d = dense_na(&s);
    let u = top_eigenvectors(&d * d.transpose(), 8);
    let left = (DMatrix::identity(56, 56) - &u * u.transpose()) * dense_na(&c);
    let oracle = (left * &v).norm_squared();
    assert!((u_rep.post_merge_residual - oracle).abs() <= 1e-9 * oracle);
    assert!(u_rep.normalized_residual() > 1e-3);
    assert!(v_rep.normalized_residual() < 1e-16);

    let hard = hard_project(&c, &sub).unwrap();
    let report = interference_report(&c, &s, &ProjectionConfig::hard()).unwrap();
    assert!((interference_energy(&hard, &sub).unwrap() - report.post_merge_residual).abs() < 1e-10);
}

#[test]
fn projector_matrices_are_orthogonal_projections() {
    let mut r = rng(30);
    let s = random_update(&mut r, 30, 40, 5);
    let sub = subspace_svd(&s, SubspaceRank::Top(3)).unwrap();
    let p = to_na(&sub.projector());
    let q = to_na(&sub.null_projector());
    assert!((&p * &p - &p).norm() < 1e-13);
    assert!((&p - p.transpose()).norm() < 1e-15);
    assert!((&p + &q - DMatrix::identity(40, 40)).norm() < 1e-14);
    assert!((p.trace() - 3.0).abs() < 1e-13);
}
