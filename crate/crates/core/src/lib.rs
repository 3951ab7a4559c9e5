//! Fusion of a content low-rank adapter into the null space of a style
//! adapter's principal right-singular subspace.
//!
//! All arithmetic is `f64`. The crate is `no_std` and only needs `alloc`;
//! file formats, the command line and threading live in the `nullfuse` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod projector;

pub use checkpoint::{AdapterCheckpoint, Dtype};
pub use error::{Error, Result};
pub use fusion::{MergedUpdate, UnpairedPolicy};
pub use linalg::{LowRankUpdate, Matrix, ThinQr, ThinSvd};
pub use projector::{MergeMode, ProjectionConfig, StyleSubspace, SubspaceMethod, SubspaceRank};
