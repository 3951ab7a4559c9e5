//! Layer-parallel checkpoint merging.

use nullfuse_core::analysis::interference_report;
use nullfuse_core::fusion::{assemble, check_plan, merge, MergedUpdate};
use nullfuse_core::{AdapterCheckpoint, ProjectionConfig, UnpairedPolicy};
use rayon::prelude::*;

use crate::io::{pair_layers, KeyPairing};

/// Per-layer line of the merge summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LayerSummary {
    pub layer_key: String,
    pub rank: usize,
    pub k_used: usize,
    /// `‖ΔW_c·V_k‖_F² / ‖ΔW_c‖_F²` before projection.
    pub interference_before: f64,
    /// Same ratio for the projected content.
    pub interference_after: f64,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub checkpoint: AdapterCheckpoint,
    pub layers: Vec<LayerSummary>,
    pub passthrough: Vec<String>,
}

/// Runs `f` on a pool of `threads` workers (0 means available parallelism).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(f))
}

fn merge_one(
    key: &str,
    content: &nullfuse_core::LowRankUpdate,
    style: &nullfuse_core::LowRankUpdate,
    cfg: &ProjectionConfig,
) -> nullfuse_core::Result<(MergedUpdate, LayerSummary)> {
    let merged = merge(content, style, cfg)?;
    let report = interference_report(content, style, cfg)?;
    let summary = LayerSummary {
        layer_key: key.to_string(),
        rank: merged.rank(),
        k_used: merged.k_used(),
        interference_before: report.ratio,
        interference_after: report.normalized_residual(),
    };
    Ok((merged, summary))
}

/// Pairs, merges and assembles. Output does not depend on `threads`.
pub fn merge_checkpoints(
    content: &AdapterCheckpoint,
    style: &AdapterCheckpoint,
    cfg: &ProjectionConfig,
    policy: UnpairedPolicy,
    pairing: &KeyPairing,
    threads: usize,
) -> anyhow::Result<MergeOutcome> {
    cfg.validate()?;
    let plan = pair_layers(content, style, pairing);
    check_plan(&plan)?;
    let results = with_threads(threads, || {
        plan.pairs
            .par_iter()
            .map(|p| {
                log::debug!("merging {}", p.key);
                merge_one(&p.key, p.content, p.style, cfg).map_err(|e| anyhow::anyhow!("layer `{}`: {e}", p.key))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })??;
    let (merged, layers): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let checkpoint = assemble(&plan, merged, cfg, policy, style.source_dtype)?;
    let passthrough = checkpoint
        .keys()
        .filter(|k| !plan.pairs.iter().any(|p| p.key == *k))
        .map(str::to_string)
        .collect();
    Ok(MergeOutcome {
        checkpoint,
        layers,
        passthrough,
    })
}
