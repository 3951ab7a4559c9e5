//! Invariant checks over seeded random instances, with dense oracles.

use nalgebra::DMatrix;
use nullfuse_core::fusion::{merge, merge_direct};
use nullfuse_core::projector::{
    hard_project, interference_energy, projector_distance, soft_project, subspace_qr, subspace_svd, woodbury_inverse,
    StyleSubspace,
};
use nullfuse_core::{LowRankUpdate, Matrix, ProjectionConfig, SubspaceRank};

use crate::synth::random_pair;

pub const MU_GRID: [f64; 4] = [0.1, 0.5, 1.0, 10.0];

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub n: usize,
    pub rank: usize,
    pub trials: usize,
    /// Replaces hard projection by `ΔW·(I + VVᵀ)` to check that the suite notices.
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 64,
            rank: 8,
            trials: 20,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CheckResult {
    pub check: String,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// First seed whose error exceeded the tolerance.
    pub failing_seed: Option<u64>,
}

struct Check {
    name: &'static str,
    tolerance: f64,
    max_error: f64,
    trials: usize,
    failing_seed: Option<u64>,
}

impl Check {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            max_error: 0.0,
            trials: 0,
            failing_seed: None,
        }
    }

    fn record(&mut self, seed: u64, err: f64) {
        let within = err <= self.tolerance;
        // NaN counts as a failure.
        if !within && self.failing_seed.is_none() {
            self.failing_seed = Some(seed);
        }
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            check: self.name.to_string(),
            trials: self.trials,
            max_error: self.max_error,
            tolerance: self.tolerance,
            passed: self.failing_seed.is_none(),
            failing_seed: self.failing_seed,
        }
    }
}

fn na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn dense(u: &LowRankUpdate) -> DMatrix<f64> {
    na(u.up()) * na(u.down()) * u.scale()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.norm();
    if scale == 0.0 {
        a.norm()
    } else {
        (a - b).norm() / scale
    }
}

fn hard(content: &LowRankUpdate, sub: &StyleSubspace, fault: bool) -> LowRankUpdate {
    if !fault {
        return hard_project(content, sub).expect("conforming shapes");
    }
    let v = sub.basis();
    let down = content.down();
    let flipped = down.add(&down.matmul(v).unwrap().matmul(&v.transpose()).unwrap()).unwrap();
    LowRankUpdate::new(content.up().clone(), flipped, content.scale()).unwrap()
}

/// Runs every check; one result per invariant.
pub fn run(cfg: &VerifyConfig) -> anyhow::Result<Vec<CheckResult>> {
    anyhow::ensure!(cfg.rank >= 1 && cfg.rank <= cfg.n, "rank must be in 1..=n");
    anyhow::ensure!(cfg.trials >= 1, "need at least one trial");
    let fault = cfg.inject_fault;
    let mut idem = Check::new("projector-idempotence", 1e-8);
    let mut woodbury = Check::new("woodbury-vs-dense", 1e-10);
    let mut paths = Check::new("svd-vs-qr", 1e-8);
    let mut zero = Check::new("soft-limit-zero", 1e-12);
    let mut infinite = Check::new("soft-limit-infinite", 1e-6);
    let mut law = Check::new("attenuation-law", 1e-9);
    let mut outside = Check::new("out-of-subspace-unchanged", 1e-10);
    let mut factored = Check::new("factored-vs-dense", 1e-10);

    let n = cfg.n;
    let eye = DMatrix::<f64>::identity(n, n);
    for t in 0..cfg.trials {
        let seed = cfg.seed.wrapping_add(t as u64);
        let (c, s) = random_pair(seed, n, n, cfg.rank);
        let sub = subspace_svd(&s, SubspaceRank::Full)?;
        let v = na(sub.basis());
        let p = &v * v.transpose();
        let c_norm = c.frob_norm();

        let once = hard(&c, &sub, fault);
        let twice = hard(&once, &sub, fault);
        let err_idem = (dense(&twice) - dense(&once)).norm() / c_norm;
        let inside = interference_energy(&once, &sub)?.sqrt() / c_norm;
        idem.record(seed, err_idem.max(inside));
        idem.trials += 1;

        for mu in MU_GRID {
            let oracle = (&eye + &p * mu).lu().try_inverse().ok_or_else(|| anyhow::anyhow!("singular I + μP"))?;
            woodbury.record(seed, rel(&na(&woodbury_inverse(&sub, mu)?), &oracle));
        }
        woodbury.trials += 1;

        let qr = subspace_qr(&s, SubspaceRank::Full)?;
        paths.record(seed, projector_distance(&sub, &qr)?);
        paths.trials += 1;

        let direct = dense_of_merge(merge_direct(&c, &s, 1.0, 1.0)?);
        let soft0 = dense_of_merge(merge(&c, &s, &ProjectionConfig::soft(0.0))?);
        zero.record(seed, (&soft0 - &direct).norm() / direct.norm());
        zero.trials += 1;
        let hard_m = dense(&s) + dense(&hard(&c, &sub, fault));
        let soft_inf = dense_of_merge(merge(&c, &s, &ProjectionConfig::soft(1e12))?);
        infinite.record(seed, rel(&soft_inf, &hard_m));
        infinite.trials += 1;

        let pre = interference_energy(&c, &sub)?;
        let out_pre = dense(&c) * (&eye - &p);
        for mu in MU_GRID {
            let projected = soft_project(&c, &sub, mu)?;
            let expected = pre / ((1.0 + mu) * (1.0 + mu));
            law.record(seed, (interference_energy(&projected, &sub)? - expected).abs() / expected);
            outside.record(seed, rel(&(dense(&projected) * (&eye - &p)), &out_pre));
        }
        law.trials += 1;
        outside.trials += 1;

        let bound = c_norm + s.frob_norm();
        for mode_cfg in [ProjectionConfig::direct(1.0, 1.0), ProjectionConfig::hard(), ProjectionConfig::soft(0.5)] {
            let oracle = dense(&s) + dense(&c) * (&eye - &p * mode_cfg.attenuation());
            let ours = if fault && mode_cfg == ProjectionConfig::hard() {
                hard_m.clone()
            } else {
                dense_of_merge(merge(&c, &s, &mode_cfg)?)
            };
            factored.record(seed, (ours - oracle).norm() / bound);
        }
        factored.trials += 1;
    }
    Ok([idem, woodbury, paths, zero, infinite, law, outside, factored]
        .into_iter()
        .map(Check::finish)
        .collect())
}

fn dense_of_merge(m: nullfuse_core::MergedUpdate) -> DMatrix<f64> {
    na(m.up()) * na(m.down())
}

/// Plain-text pass/fail table.
pub fn table(results: &[CheckResult]) -> String {
    let mut out = format!("{:<28} {:>6} {:>12} {:>10}  result\n", "check", "trials", "max error", "tolerance");
    for r in results {
        let verdict = match (r.passed, r.failing_seed) {
            (true, _) => "PASS".to_string(),
            (false, Some(seed)) => format!("FAIL (seed {seed})"),
            (false, None) => "FAIL".to_string(),
        };
        out += &format!(
            "{:<28} {:>6} {:>12.3e} {:>10.0e}  {verdict}\n",
            r.check, r.trials, r.max_error, r.tolerance
        );
    }
    out
}
