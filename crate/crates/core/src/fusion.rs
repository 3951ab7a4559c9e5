//! Merging a content and a style update into one factored update.
//!
//! The merged update is kept exact as a block concatenation: `up = [B_s | B_c']`,
//! `down = [A_s ; A_c']`, so its rank is `r_s + r_c`. Scales are folded into the
//! up-factors first, which leaves the style blocks bit-identical to the
//! style's effective factors.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::checkpoint::{AdapterCheckpoint, Dtype};
use crate::error::{Error, Result};
use crate::linalg::{LowRankUpdate, Matrix};
use crate::projector::{MergeMode, ProjectionConfig};

/// Metadata key prefix written by [`assemble`].
pub const METADATA_PREFIX: &str = "nullfuse.";

/// `ΔW_m` in factored form, style block first.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedUpdate {
    up: Matrix,
    down: Matrix,
    style_rank: usize,
    provenance: MergeMode,
    mu_used: Option<f64>,
    k_used: usize,
}

impl MergedUpdate {
    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn rank(&self) -> usize {
        self.up.cols()
    }

    pub fn style_rank(&self) -> usize {
        self.style_rank
    }

    pub fn content_rank(&self) -> usize {
        self.rank() - self.style_rank
    }

    pub fn provenance(&self) -> MergeMode {
        self.provenance
    }

    pub fn mu_used(&self) -> Option<f64> {
        self.mu_used
    }

    /// Number of protected directions (0 for direct merges).
    pub fn k_used(&self) -> usize {
        self.k_used
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.up.rows(), self.down.cols())
    }

    pub fn dense(&self) -> Matrix {
        self.up.mul(&self.down)
    }

    /// Style block as an update of scale one.
    pub fn style_part(&self) -> LowRankUpdate {
        self.block(0, self.style_rank)
    }

    /// Content block (projected, weighted) as an update of scale one.
    pub fn content_part(&self) -> LowRankUpdate {
        self.block(self.style_rank, self.rank())
    }

    fn block(&self, start: usize, end: usize) -> LowRankUpdate {
        LowRankUpdate::new(self.up.columns(start, end), self.down.row_range(start, end), 1.0)
            .expect("blocks of a merged update conform")
    }

    /// Converts to a plain update with scale one. Fails with
    /// [`Error::RankTooLarge`] when `r_s + r_c` exceeds `min(m, n)`, since no
    /// lossy re-compression is attempted.
    pub fn to_update(&self) -> Result<LowRankUpdate> {
        LowRankUpdate::new(self.up.clone(), self.down.clone(), 1.0)
    }

    /// Single-line provenance record.
    pub fn describe(&self) -> String {
        match self.provenance {
            MergeMode::Direct => format!("direct rank={}", self.rank()),
            MergeMode::Hard => format!("hard k={} rank={}", self.k_used, self.rank()),
            MergeMode::Soft => format!(
                "soft mu={} k={} rank={}",
                self.mu_used.unwrap_or(0.0),
                self.k_used,
                self.rank()
            ),
        }
    }
}

fn check_shapes(content: &LowRankUpdate, style: &LowRankUpdate) -> Result<()> {
    if content.shape() != style.shape() {
        return Err(Error::ShapeMismatch {
            op: "merge",
            left: content.shape(),
            right: style.shape(),
        });
    }
    Ok(())
}

fn concat(style_up: Matrix, style: &LowRankUpdate, content_up: Matrix, content_down: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((style_up.hstack(&content_up)?, style.down().vstack(content_down)?))
}

/// `a·ΔW_c + b·ΔW_s` with the weights folded into the up-factors.
pub fn merge_direct(content: &LowRankUpdate, style: &LowRankUpdate, a: f64, b: f64) -> Result<MergedUpdate> {
    check_shapes(content, style)?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidConfig("direct weights must be finite"));
    }
    let weigh = |u: &LowRankUpdate, w: f64| {
        let up = u.effective_up();
        if w == 1.0 {
            up
        } else {
            up.scaled(w)
        }
    };
    let (up, down) = concat(weigh(style, b), style, weigh(content, a), content.down())?;
    Ok(MergedUpdate {
        up,
        down,
        style_rank: style.rank(),
        provenance: MergeMode::Direct,
        mu_used: None,
        k_used: 0,
    })
}

/// `ΔW_s + ΔW_c·P` for the hard or soft projector `P` selected by `cfg`.
pub fn merge_np(content: &LowRankUpdate, style: &LowRankUpdate, cfg: &ProjectionConfig) -> Result<MergedUpdate> {
    cfg.validate()?;
    if cfg.mode == MergeMode::Direct {
        return Err(Error::InvalidConfig("merge_np needs hard or soft mode"));
    }
    check_shapes(content, style)?;
    let sub = cfg.subspace(style)?;
    let content = content.folded();
    let projected = cfg.project(&content, &sub)?;
    let (up, down) = concat(style.effective_up(), style, projected.up().clone(), projected.down())?;
    Ok(MergedUpdate {
        up,
        down,
        style_rank: style.rank(),
        provenance: cfg.mode,
        mu_used: (cfg.mode == MergeMode::Soft).then_some(cfg.mu),
        k_used: sub.k(),
    })
}

/// Dispatches on `cfg.mode`.
pub fn merge(content: &LowRankUpdate, style: &LowRankUpdate, cfg: &ProjectionConfig) -> Result<MergedUpdate> {
    match cfg.mode {
        MergeMode::Direct => {
            cfg.validate()?;
            let (a, b) = cfg.direct_weights;
            merge_direct(content, style, a, b)
        }
        _ => merge_np(content, style, cfg),
    }
}

/// `W = W₀ + ΔW_m`.
pub fn apply_to_base(base: &Matrix, merged: &MergedUpdate) -> Result<Matrix> {
    if base.shape() != merged.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_to_base",
            left: base.shape(),
            right: merged.shape(),
        });
    }
    base.add(&merged.dense())
}

/// What to do with layers present in only one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum UnpairedPolicy {
    Error,
    KeepStyleOnly,
    #[default]
    KeepBothPassthrough,
}

impl core::fmt::Display for UnpairedPolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            UnpairedPolicy::Error => "error",
            UnpairedPolicy::KeepStyleOnly => "keep-style-only",
            UnpairedPolicy::KeepBothPassthrough => "keep-both-passthrough",
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerPair<'a> {
    /// Output key.
    pub key: String,
    pub content: &'a LowRankUpdate,
    pub style: &'a LowRankUpdate,
}

/// Layers to merge plus the leftovers of each side, all in key order.
#[derive(Debug, Clone, Default)]
pub struct MergePlan<'a> {
    pub pairs: Vec<LayerPair<'a>>,
    pub content_only: Vec<(String, &'a LowRankUpdate)>,
    pub style_only: Vec<(String, &'a LowRankUpdate)>,
}

/// Pairs layers whose keys are equal.
pub fn plan_by_key<'a>(content: &'a AdapterCheckpoint, style: &'a AdapterCheckpoint) -> MergePlan<'a> {
    let mut plan = MergePlan::default();
    for (key, c) in &content.layers {
        match style.layers.get(key) {
            Some(s) => plan.pairs.push(LayerPair {
                key: key.clone(),
                content: c,
                style: s,
            }),
            None => plan.content_only.push((key.clone(), c)),
        }
    }
    for (key, s) in &style.layers {
        if !content.layers.contains_key(key) {
            plan.style_only.push((key.clone(), s));
        }
    }
    plan
}

fn common_prefix(a: &str, b: &str) -> usize {
    a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count()
}

/// Up to three (content, style) key pairs sharing the longest prefixes.
fn nearest_misses<'a>(content: impl Iterator<Item = &'a str>, style: &[&'a str]) -> (Vec<String>, Vec<String>) {
    let mut scored: Vec<(usize, &str, &str)> = content
        .filter_map(|c| {
            style
                .iter()
                .map(|s| (common_prefix(c, s), c, *s))
                .max_by(|x, y| x.0.cmp(&y.0).then(y.2.cmp(x.2)))
        })
        .collect();
    scored.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(y.1)));
    scored.truncate(3);
    scored.into_iter().map(|(_, c, s)| (c.to_string(), s.to_string())).unzip()
}

/// Builds the output checkpoint from a plan and the merged layers for
/// `plan.pairs` (same order).
pub fn assemble(
    plan: &MergePlan<'_>,
    merged: Vec<MergedUpdate>,
    cfg: &ProjectionConfig,
    policy: UnpairedPolicy,
    source_dtype: Dtype,
) -> Result<AdapterCheckpoint> {
    assert_eq!(plan.pairs.len(), merged.len(), "one merged layer per pair");
    let mut out = AdapterCheckpoint::new(source_dtype);
    let meta = |k: &str| format!("{METADATA_PREFIX}{k}");
    out.metadata.insert(meta("tool"), "nullfuse".to_string());
    out.metadata.insert(meta("version"), env!("CARGO_PKG_VERSION").to_string());
    out.metadata.insert(meta("merge"), cfg.summary());
    out.metadata.insert(meta("unpaired_policy"), policy.to_string());

    for (pair, m) in plan.pairs.iter().zip(merged) {
        let layer = m.to_update()?;
        out.metadata.insert(meta(&format!("layer.{}", pair.key)), m.describe());
        if out.layers.insert(pair.key.clone(), layer).is_some() {
            return Err(Error::DuplicateLayer(pair.key.clone()));
        }
    }

    let mut passthrough = |side: &str, items: &[(String, &LowRankUpdate)]| -> Result<()> {
        for (key, layer) in items {
            out.metadata
                .insert(meta(&format!("layer.{key}")), format!("passthrough-{side} rank={}", layer.rank()));
            if out.layers.insert(key.clone(), (*layer).clone()).is_some() {
                return Err(Error::DuplicateLayer(key.clone()));
            }
        }
        Ok(())
    };
    match policy {
        UnpairedPolicy::Error => {
            if let Some((key, _)) = plan.content_only.first().or(plan.style_only.first()) {
                return Err(Error::UnpairedLayer(key.clone()));
            }
        }
        UnpairedPolicy::KeepStyleOnly => passthrough("style", &plan.style_only)?,
        UnpairedPolicy::KeepBothPassthrough => {
            passthrough("style", &plan.style_only)?;
            passthrough("content", &plan.content_only)?;
        }
    }
    Ok(out)
}

/// Fails with the closest key candidates when nothing pairs up.
pub fn check_plan(plan: &MergePlan<'_>) -> Result<()> {
    if plan.pairs.is_empty() {
        let style: Vec<&str> = plan.style_only.iter().map(|(k, _)| k.as_str()).collect();
        let (content_near, style_near) = nearest_misses(plan.content_only.iter().map(|(k, _)| k.as_str()), &style);
        return Err(Error::NoSharedLayers {
            content_near,
            style_near,
        });
    }
    Ok(())
}

/// Merges every layer present in both checkpoints (exact key match).
pub fn merge_checkpoint(
    content: &AdapterCheckpoint,
    style: &AdapterCheckpoint,
    cfg: &ProjectionConfig,
    policy: UnpairedPolicy,
) -> Result<AdapterCheckpoint> {
    cfg.validate()?;
    let plan = plan_by_key(content, style);
    check_plan(&plan)?;
    let merged = plan
        .pairs
        .iter()
        .map(|p| merge(p.content, p.style, cfg))
        .collect::<Result<Vec<_>>>()?;
    assemble(&plan, merged, cfg, policy, style.source_dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn upd(up: &[&[f64]], down: &[&[f64]], scale: f64) -> LowRankUpdate {
        LowRankUpdate::new(Matrix::from_rows(up).unwrap(), Matrix::from_rows(down).unwrap(), scale).unwrap()
    }

    fn pair() -> (LowRankUpdate, LowRankUpdate) {
        let content = upd(&[&[1.0], &[2.0], &[0.5]], &[&[1.0, 1.0, 0.0, 2.0]], 1.0);
        let style = upd(&[&[0.0, 1.0], &[1.0, 1.0], &[2.0, 0.0]], &[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0]], 0.5);
        (content, style)
    }

    #[test]
    fn direct_weights() {
        let (c, s) = pair();
        let only_content = merge_direct(&c, &s, 1.0, 0.0).unwrap();
        assert_eq!(only_content.dense(), c.dense());
        let both = merge_direct(&c, &s, 1.0, 1.0).unwrap();
        assert_eq!(both.rank(), 3);
        assert_eq!(both.style_rank(), 2);
        assert!(both.dense().sub(&c.dense().add(&s.dense()).unwrap()).unwrap().frob_norm() < 1e-14);
        assert_eq!(both.style_part().up(), &s.effective_up());
        assert_eq!(both.provenance(), MergeMode::Direct);
    }

    #[test]
    fn soft_zero_equals_direct() {
        let (c, s) = pair();
        let soft = merge_np(&c, &s, &ProjectionConfig::soft(0.0)).unwrap();
        let direct = merge_direct(&c, &s, 1.0, 1.0).unwrap();
        assert_eq!(soft.up(), direct.up());
        assert_eq!(soft.down(), direct.down());
        assert_eq!(soft.mu_used(), Some(0.0));
    }

    #[test]
    fn hard_self_merge_is_style() {
        let (_, s) = pair();
        let m = merge_np(&s, &s, &ProjectionConfig::hard()).unwrap();
        let d = s.dense();
        assert!(m.dense().sub(&d).unwrap().frob_norm() <= 1e-10 * d.frob_norm());
        assert_eq!(m.k_used(), 2);
        assert_eq!(m.describe(), "hard k=2 rank=4");
    }

    #[test]
    fn merge_np_rejects_direct_and_mismatch() {
        let (c, s) = pair();
        assert!(merge_np(&c, &s, &ProjectionConfig::direct(1.0, 1.0)).is_err());
        let other = upd(&[&[1.0], &[2.0]], &[&[1.0, 1.0, 0.0, 2.0]], 1.0);
        assert!(matches!(merge_direct(&other, &s, 1.0, 1.0), Err(Error::ShapeMismatch { .. })));
        assert_eq!(merge_np(&c, &s, &ProjectionConfig::soft(-1.0)), Err(Error::InvalidMu(-1.0)));
    }

    #[test]
    fn base_application() {
        let (c, s) = pair();
        let m = merge_direct(&c, &s, 1.0, 1.0).unwrap();
        let zero = Matrix::zeros(3, 4);
        assert_eq!(apply_to_base(&zero, &m).unwrap(), m.dense());
        let zero_merged = merge_direct(&c, &s, 0.0, 0.0).unwrap();
        let base = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(apply_to_base(&base, &zero_merged).unwrap(), base);
        assert!(apply_to_base(&Matrix::zeros(4, 3), &m).is_err());
    }

    fn ckpt(layers: &[(&str, LowRankUpdate)]) -> AdapterCheckpoint {
        let mut c = AdapterCheckpoint::new(Dtype::F32);
        for (k, l) in layers {
            c.insert(*k, l.clone());
        }
        c
    }

    #[test]
    fn checkpoint_policies() {
        let (c, s) = pair();
        let content = ckpt(&[("down.0", c.clone()), ("mid.0", c.clone())]);
        let style = ckpt(&[("mid.0", s.clone()), ("up.0", s.clone())]);

        let keep_style = merge_checkpoint(&content, &style, &ProjectionConfig::hard(), UnpairedPolicy::KeepStyleOnly).unwrap();
        assert_eq!(keep_style.keys().collect::<Vec<_>>(), vec!["mid.0", "up.0"]);
        assert_eq!(keep_style.get("up.0"), Some(&s));
        assert_eq!(keep_style.get("mid.0").unwrap().rank(), 3);
        assert_eq!(keep_style.metadata["nullfuse.layer.mid.0"], "hard k=2 rank=3");
        assert_eq!(keep_style.metadata["nullfuse.layer.up.0"], "passthrough-style rank=2");

        let both = merge_checkpoint(&content, &style, &ProjectionConfig::default(), UnpairedPolicy::default()).unwrap();
        assert_eq!(both.len(), 3);
        assert_eq!(both.metadata["nullfuse.merge"], ProjectionConfig::default().summary());

        assert_eq!(
            merge_checkpoint(&content, &style, &ProjectionConfig::hard(), UnpairedPolicy::Error),
            Err(Error::UnpairedLayer("down.0".into()))
        );
    }

    #[test]
    fn identical_single_layer_hard() {
        let s = LowRankUpdate::new(
            Matrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64 - 1.5),
            Matrix::from_fn(2, 6, |i, j| libm::cos((i * 6 + j) as f64)),
            0.25,
        )
        .unwrap();
        let a = ckpt(&[("attn.to_q", s.clone())]);
        let out = merge_checkpoint(&a, &a, &ProjectionConfig::hard(), UnpairedPolicy::Error).unwrap();
        let d = s.dense();
        assert!(out.get("attn.to_q").unwrap().dense().sub(&d).unwrap().frob_norm() <= 1e-10 * d.frob_norm());
    }

    #[test]
    fn empty_intersection_lists_near_misses() {
        let (c, s) = pair();
        let content = ckpt(&[("unet.down.attn1.to_k", c.clone()), ("zzz", c.clone())]);
        let style = ckpt(&[("unet.down.attn1.to_k_lora", s.clone()), ("aaa", s)]);
        match merge_checkpoint(&content, &style, &ProjectionConfig::hard(), UnpairedPolicy::default()) {
            Err(Error::NoSharedLayers { content_near, style_near }) => {
                assert_eq!(content_near[0], "unet.down.attn1.to_k");
                assert_eq!(style_near[0], "unet.down.attn1.to_k_lora");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
