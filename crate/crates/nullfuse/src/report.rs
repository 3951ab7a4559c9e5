//! Machine-readable reports: versioned JSON documents and one-row-per-record CSV.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use nullfuse_core::analysis::{InterferenceReport, SpectrumReport};
use serde::Serialize;

use crate::io::TOOL_VERSION;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Spectrum,
    Interference,
    Colinearity,
    CompareUv,
    Perturb,
    Merge,
    Verify,
    Bench,
}

impl ReportKind {
    pub const ALL: [ReportKind; 8] = [
        ReportKind::Spectrum,
        ReportKind::Interference,
        ReportKind::Colinearity,
        ReportKind::CompareUv,
        ReportKind::Perturb,
        ReportKind::Merge,
        ReportKind::Verify,
        ReportKind::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Spectrum => "spectrum",
            ReportKind::Interference => "interference",
            ReportKind::Colinearity => "colinearity",
            ReportKind::CompareUv => "compare-uv",
            ReportKind::Perturb => "perturb",
            ReportKind::Merge => "merge",
            ReportKind::Verify => "verify",
            ReportKind::Bench => "bench",
        }
    }

    pub fn schema_id(self) -> String {
        format!("nullfuse/{}/v{SCHEMA_VERSION}", self.name())
    }

    /// The published JSON schema for this report.
    pub fn schema(self) -> &'static str {
        match self {
            ReportKind::Spectrum => include_str!("../schemas/spectrum.schema.json"),
            ReportKind::Interference => include_str!("../schemas/interference.schema.json"),
            ReportKind::Colinearity => include_str!("../schemas/colinearity.schema.json"),
            ReportKind::CompareUv => include_str!("../schemas/compare-uv.schema.json"),
            ReportKind::Perturb => include_str!("../schemas/perturb.schema.json"),
            ReportKind::Merge => include_str!("../schemas/merge.schema.json"),
            ReportKind::Verify => include_str!("../schemas/verify.schema.json"),
            ReportKind::Bench => include_str!("../schemas/bench.schema.json"),
        }
    }
}

/// Envelope shared by every JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct Document<T> {
    pub schema: String,
    pub schema_version: u32,
    pub tool_version: &'static str,
    /// Flags of the run, defaults included.
    pub config: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<String>,
    pub records: Vec<T>,
}

impl<T: Serialize> Document<T> {
    pub fn new(kind: ReportKind, config: BTreeMap<String, serde_json::Value>, inputs: Vec<String>, records: Vec<T>) -> Self {
        Self {
            schema: kind.schema_id(),
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            config,
            inputs,
            records,
        }
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterferenceRow {
    pub layer_key: String,
    pub content_energy_in_style_subspace: f64,
    pub content_total_energy: f64,
    pub ratio: f64,
    pub post_merge_residual: f64,
    pub normalized_residual: f64,
    /// Post over pre in-subspace energy.
    pub attenuation: f64,
}

impl From<&InterferenceReport> for InterferenceRow {
    fn from(r: &InterferenceReport) -> Self {
        Self {
            layer_key: r.layer_key.clone(),
            content_energy_in_style_subspace: r.content_energy_in_style_subspace,
            content_total_energy: r.content_total_energy,
            ratio: r.ratio,
            post_merge_residual: r.post_merge_residual,
            normalized_residual: r.normalized_residual(),
            attenuation: r.attenuation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColinearityRow {
    pub layer_key: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareUvRow {
    pub layer_key: String,
    pub v_space: InterferenceRow,
    pub u_space: InterferenceRow,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbRow {
    pub layer_key: String,
    pub index: usize,
    pub singular_value: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub frobenius_change: f64,
    pub relative_change: f64,
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Flat rows, one per record, header from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `layer_key, rank, degenerate, sigma_1.., energy_1..`; short rows are left blank.
pub fn write_spectrum_csv(path: &Path, rows: &[SpectrumReport]) -> anyhow::Result<()> {
    let width = rows.iter().map(|r| r.singular_values.len()).max().unwrap_or(0);
    let mut w = csv_writer(path)?;
    let mut header = vec!["layer_key".to_string(), "rank".into(), "degenerate".into()];
    header.extend((1..=width).map(|i| format!("sigma_{i}")));
    header.extend((1..=width).map(|i| format!("energy_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let pad = |v: &[f64]| -> Vec<String> { (0..width).map(|i| v.get(i).map(|x| x.to_string()).unwrap_or_default()).collect() };
        let mut rec = vec![r.layer_key.clone(), r.singular_values.len().to_string(), r.degenerate.to_string()];
        rec.extend(pad(&r.singular_values));
        rec.extend(pad(&r.energy_fractions));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_compare_uv_csv(path: &Path, rows: &[CompareUvRow]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "layer_key",
        "content_energy_in_style_subspace",
        "content_total_energy",
        "ratio",
        "v_post_merge_residual",
        "v_normalized_residual",
        "u_post_merge_residual",
        "u_normalized_residual",
    ])?;
    for r in rows {
        w.write_record([
            r.layer_key.clone(),
            r.v_space.content_energy_in_style_subspace.to_string(),
            r.v_space.content_total_energy.to_string(),
            r.v_space.ratio.to_string(),
            r.v_space.post_merge_residual.to_string(),
            r.v_space.normalized_residual.to_string(),
            r.u_space.post_merge_residual.to_string(),
            r.u_space.normalized_residual.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
