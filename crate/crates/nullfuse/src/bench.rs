//! Wall-clock comparison of the SVD and QR subspace paths.

use std::time::{Duration, Instant};

use nullfuse_core::projector::{projector_distance, subspace_qr, subspace_svd};
use nullfuse_core::SubspaceRank;

use crate::synth::{random_update, rng};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            m: 4096,
            n: 4096,
            rank: 8,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchResult {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub repeats: usize,
    /// Median over repeats.
    pub svd_seconds: f64,
    pub qr_seconds: f64,
    pub speedup: f64,
    /// Between the two projectors of the last repeat.
    pub projector_distance: f64,
}

fn median(mut xs: Vec<Duration>) -> f64 {
    xs.sort();
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid].as_secs_f64()
    } else {
        (xs[mid - 1].as_secs_f64() + xs[mid].as_secs_f64()) / 2.0
    }
}

/// Times both paths on the same seeded style adapter; `repeats` runs each.
pub fn run(cfg: &BenchConfig) -> anyhow::Result<BenchResult> {
    anyhow::ensure!(cfg.m > 0 && cfg.n > 0, "dimensions must be positive");
    anyhow::ensure!(cfg.rank >= 1 && cfg.rank <= cfg.m.min(cfg.n), "rank must be in 1..=min(m, n)");
    anyhow::ensure!(cfg.repeats >= 1, "need at least one repeat");
    let style = random_update(&mut rng(cfg.seed), cfg.m, cfg.n, cfg.rank);
    let (mut svd_times, mut qr_times) = (Vec::new(), Vec::new());
    let mut distance = 0.0;
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        let a = subspace_svd(&style, SubspaceRank::Full)?;
        svd_times.push(t.elapsed());
        let t = Instant::now();
        let b = subspace_qr(&style, SubspaceRank::Full)?;
        qr_times.push(t.elapsed());
        distance = projector_distance(&a, &b)?;
    }
    let svd_seconds = median(svd_times);
    let qr_seconds = median(qr_times);
    Ok(BenchResult {
        m: cfg.m,
        n: cfg.n,
        rank: cfg.rank,
        repeats: cfg.repeats,
        svd_seconds,
        qr_seconds,
        speedup: svd_seconds / qr_seconds.max(1e-9),
        projector_distance: distance,
    })
}

pub fn table(r: &BenchResult) -> String {
    format!(
        "{:>6} {:>6} {:>5} {:>12} {:>12} {:>9} {:>12}\n{:>6} {:>6} {:>5} {:>12.6} {:>12.6} {:>8.1}x {:>12.3e}\n",
        "m", "n", "rank", "svd (s)", "qr (s)", "speedup", "distance",
        r.m, r.n, r.rank, r.svd_seconds, r.qr_seconds, r.speedup, r.projector_distance
    )
}
