//! Dense and factored matrices with the decompositions the projector needs.

mod lowrank;
mod matrix;
mod qr;
mod svd;

pub use lowrank::{dense, factored_inner, LowRankUpdate};
pub use matrix::{frob_norm, Matrix};
pub use qr::{householder_qr, thin_qr, ThinQr, QR_RANK_TOL};
pub use svd::{numerical_rank, thin_svd, thin_svd_with, SvdOptions, ThinSvd, DEFAULT_RANK_TOL};

pub(crate) use matrix::{dot, norm};
