//! Command-line surface. `main.rs` only parses and dispatches to [`run`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nullfuse_core::analysis::{colinearity_test, compare_uv_projection, interference_report, perturb_directions, spectrum};
use nullfuse_core::fusion::check_plan;
use nullfuse_core::{AdapterCheckpoint, Dtype, MergeMode, ProjectionConfig, SubspaceMethod, SubspaceRank, UnpairedPolicy};
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{pair_layers, read_checkpoint, write_checkpoint, KeyPairing, TOOL_NAME};
use crate::merge::{merge_checkpoints, with_threads};
use crate::report::{self, ColinearityRow, CompareUvRow, Document, InterferenceRow, PerturbRow, ReportKind};
use crate::{bench, verify};

/// Environment variable read for log verbosity (`error`, `warn`, `info`, `debug`, `trace`).
pub const LOG_ENV: &str = "NULLFUSE_LOG";

#[derive(Debug, Parser)]
#[command(name = "nullfuse", version, about = "Merge a content adapter into the null space of a style adapter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge two adapter checkpoints.
    Merge(MergeArgs),
    /// Diagnostics on adapter checkpoints.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Check the numerical invariants on seeded random adapters.
    Verify(VerifyArgs),
    /// Time SVD-based against QR-based subspace construction.
    Bench(BenchArgs),
    /// Print the JSON schema of a report.
    Schema {
        #[arg(value_enum)]
        kind: SchemaKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Direct,
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    Svd,
    Qr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutDtype {
    F32,
    F16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unpaired {
    Error,
    KeepStyleOnly,
    KeepBothPassthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemaKind {
    Spectrum,
    Interference,
    Colinearity,
    CompareUv,
    Perturb,
    Merge,
    Verify,
    Bench,
}

fn parse_k(s: &str) -> Result<SubspaceRank, String> {
    if s.eq_ignore_ascii_case("full") {
        return Ok(SubspaceRank::Full);
    }
    match s.parse::<usize>() {
        Ok(0) => Err("k must be at least 1".into()),
        Ok(k) => Ok(SubspaceRank::Top(k)),
        Err(_) => Err(format!("expected `full` or a positive integer, got `{s}`")),
    }
}

fn serialize_k<S: serde::Serializer>(k: &SubspaceRank, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&k.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProjectionArgs {
    /// Merge rule.
    #[arg(long, value_enum, default_value = "soft")]
    pub mode: Mode,
    /// Soft-projection strength (0 = direct merge, large = hard projection).
    #[arg(long, default_value_t = nullfuse_core::projector::DEFAULT_MU, allow_negative_numbers = true)]
    pub mu: f64,
    /// Number of protected style directions: `full` or a count.
    #[arg(long, default_value = "full", value_parser = parse_k)]
    #[serde(serialize_with = "serialize_k")]
    pub k: SubspaceRank,
    /// How the style subspace is computed (`qr` requires k = full).
    #[arg(long, value_enum, default_value = "svd")]
    pub basis: Basis,
    /// Relative singular-value threshold for the numerical rank of the style update.
    #[arg(long, default_value_t = nullfuse_core::linalg::DEFAULT_RANK_TOL)]
    pub rank_tol: f64,
    /// Content weight for `--mode direct`.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub content_weight: f64,
    /// Style weight for `--mode direct`.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub style_weight: f64,
}

impl ProjectionArgs {
    pub fn config(&self) -> nullfuse_core::Result<ProjectionConfig> {
        let cfg = ProjectionConfig {
            mode: match self.mode {
                Mode::Direct => MergeMode::Direct,
                Mode::Hard => MergeMode::Hard,
                Mode::Soft => MergeMode::Soft,
            },
            mu: self.mu,
            k: self.k,
            direct_weights: (self.content_weight, self.style_weight),
            method: match self.basis {
                Basis::Svd => SubspaceMethod::Svd,
                Basis::Qr => SubspaceMethod::Qr,
            },
            rank_tol: self.rank_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PairingArgs {
    /// Up-factor tensor suffix (repeatable, first is used for output).
    #[arg(long = "up-suffix", default_values_t = ["lora_up.weight".to_string(), "lora_B.weight".to_string()])]
    pub up_suffixes: Vec<String>,
    /// Down-factor tensor suffix, aligned with --up-suffix.
    #[arg(long = "down-suffix", default_values_t = ["lora_down.weight".to_string(), "lora_A.weight".to_string()])]
    pub down_suffixes: Vec<String>,
    /// Alpha tensor suffix; empty disables alpha handling.
    #[arg(long, default_value = "alpha")]
    pub alpha_suffix: String,
    /// Stem rewrite `PATTERN=>REPLACEMENT` applied before pairing layers (repeatable).
    #[arg(long = "rewrite")]
    pub rewrites: Vec<String>,
}

impl PairingArgs {
    pub fn pairing(&self) -> anyhow::Result<KeyPairing> {
        let alpha = (!self.alpha_suffix.is_empty()).then(|| self.alpha_suffix.clone());
        let mut p = KeyPairing::new(self.up_suffixes.clone(), self.down_suffixes.clone(), alpha).map_err(anyhow::Error::msg)?;
        for r in &self.rewrites {
            p = p.with_rewrite(r).map_err(anyhow::Error::msg)?;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write the CSV report here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Worker threads for layer-parallel work (0 = available parallelism).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MergeArgs {
    pub content: PathBuf,
    pub style: PathBuf,
    /// Output checkpoint.
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub projection: ProjectionArgs,
    #[command(flatten)]
    pub pairing: PairingArgs,
    /// Storage precision of the output.
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: OutDtype,
    /// Handling of layers present in only one input.
    #[arg(long, value_enum, default_value = "keep-both-passthrough")]
    pub unpaired: Unpaired,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PairArgs {
    pub content: PathBuf,
    pub style: PathBuf,
    #[command(flatten)]
    pub pairing: PairingArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Singular values of every layer.
    Spectrum(SpectrumArgs),
    /// Content energy inside the style subspace before and after projection.
    Interference {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        projection: ProjectionArgs,
    },
    /// Residual of fitting the content's in-subspace part by a multiple of the style.
    Colinearity {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value = "full", value_parser = parse_k)]
        k: SubspaceRank,
    },
    /// Input-side against output-side projection.
    CompareUv {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        projection: ProjectionArgs,
    },
    /// Frobenius change from perturbing single singular directions.
    Perturb(PerturbArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SpectrumArgs {
    pub path: PathBuf,
    #[command(flatten)]
    pub pairing: PairingArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PerturbArgs {
    pub path: PathBuf,
    /// Direction indices, each perturbed on its own (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub indices: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub pairing: PairingArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Square dimension of the random adapters.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    pub m: usize,
    #[arg(long, default_value_t = 4096)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    ChecksFailed,
}

fn config_of(args: &impl Serialize) -> BTreeMap<String, serde_json::Value> {
    match serde_json::to_value(args) {
        Ok(serde_json::Value::Object(map)) => map.into_iter().collect(),
        _ => BTreeMap::new(),
    }
}

fn merged_config(a: &impl Serialize, b: &impl Serialize) -> BTreeMap<String, serde_json::Value> {
    let mut out = config_of(a);
    out.extend(config_of(b));
    out
}

fn load(path: &PathBuf, pairing: &KeyPairing) -> anyhow::Result<AdapterCheckpoint> {
    Ok(read_checkpoint(path, pairing)
        .with_context(|| format!("reading {}", path.display()))?
        .checkpoint)
}

pub fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Merge(args) => cmd_merge(&args),
        Command::Analyze(cmd) => cmd_analyze(cmd),
        Command::Verify(args) => cmd_verify(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Schema { kind } => {
            let kind = ReportKind::ALL[kind as usize];
            print!("{}", kind.schema());
            Ok(Status::Ok)
        }
    }
}

pub fn cmd_merge(args: &MergeArgs) -> anyhow::Result<Status> {
    let cfg = args.projection.config()?;
    let pairing = args.pairing.pairing()?;
    let content = load(&args.content, &pairing)?;
    let style = load(&args.style, &pairing)?;
    let policy = match args.unpaired {
        Unpaired::Error => UnpairedPolicy::Error,
        Unpaired::KeepStyleOnly => UnpairedPolicy::KeepStyleOnly,
        Unpaired::KeepBothPassthrough => UnpairedPolicy::KeepBothPassthrough,
    };
    let mut outcome = merge_checkpoints(&content, &style, &cfg, policy, &pairing, args.out.threads)?;
    let echo = serde_json::to_string(&config_of(args))?;
    outcome.checkpoint.metadata.insert(format!("{TOOL_NAME}.command"), echo);
    let dtype = match args.dtype {
        OutDtype::F32 => Dtype::F32,
        OutDtype::F16 => Dtype::F16,
    };
    write_checkpoint(&outcome.checkpoint, &args.output, dtype, &pairing)
        .with_context(|| format!("writing {}", args.output.display()))?;

    println!("{}", cfg.summary());
    println!("{:<60} {:>5} {:>4} {:>14} {:>14}", "layer", "rank", "k", "interf. before", "interf. after");
    for l in &outcome.layers {
        println!(
            "{:<60} {:>5} {:>4} {:>14.6e} {:>14.6e}",
            l.layer_key, l.rank, l.k_used, l.interference_before, l.interference_after
        );
    }
    for key in &outcome.passthrough {
        println!("{key:<60} passthrough");
    }
    println!(
        "wrote {} layers ({} merged) to {}",
        outcome.checkpoint.len(),
        outcome.layers.len(),
        args.output.display()
    );

    let inputs = vec![args.content.display().to_string(), args.style.display().to_string()];
    let doc = Document::new(ReportKind::Merge, config_of(args), inputs, outcome.layers.clone());
    if let Some(p) = &args.out.json {
        doc.write_json(p)?;
    }
    if let Some(p) = &args.out.csv {
        report::write_csv(p, &outcome.layers)?;
    }
    Ok(Status::Ok)
}

/// Loads both inputs and returns per-pair results in key order.
fn per_pair<T: Send>(
    pair: &PairArgs,
    f: impl Fn(&str, &nullfuse_core::LowRankUpdate, &nullfuse_core::LowRankUpdate) -> nullfuse_core::Result<T> + Sync,
) -> anyhow::Result<Vec<T>> {
    let pairing = pair.pairing.pairing()?;
    let content = load(&pair.content, &pairing)?;
    let style = load(&pair.style, &pairing)?;
    let plan = pair_layers(&content, &style, &pairing);
    check_plan(&plan)?;
    with_threads(pair.out.threads, || {
        plan.pairs
            .par_iter()
            .map(|p| f(&p.key, p.content, p.style).map_err(|e| anyhow::anyhow!("layer `{}`: {e}", p.key)))
            .collect()
    })?
}

fn pair_inputs(pair: &PairArgs) -> Vec<String> {
    vec![pair.content.display().to_string(), pair.style.display().to_string()]
}

pub fn cmd_analyze(cmd: AnalyzeCommand) -> anyhow::Result<Status> {
    match cmd {
        AnalyzeCommand::Spectrum(args) => {
            let pairing = args.pairing.pairing()?;
            let ckpt = load(&args.path, &pairing)?;
            let layers: Vec<_> = ckpt.layers.iter().collect();
            let rows = with_threads(args.out.threads, || {
                layers
                    .par_iter()
                    .map(|(k, l)| spectrum(l).map(|r| r.with_key(k.as_str())))
                    .collect::<nullfuse_core::Result<Vec<_>>>()
            })??;
            for r in &rows {
                let sv: Vec<String> = r.singular_values.iter().map(|s| format!("{s:.4e}")).collect();
                let flag = if r.degenerate { " (degenerate)" } else { "" };
                println!("{}: [{}]{flag}", r.layer_key, sv.join(", "));
            }
            let doc = Document::new(ReportKind::Spectrum, config_of(&args), vec![args.path.display().to_string()], rows);
            if let Some(p) = &args.out.json {
                doc.write_json(p)?;
            }
            if let Some(p) = &args.out.csv {
                report::write_spectrum_csv(p, &doc.records)?;
            }
        }
        AnalyzeCommand::Interference { pair, projection } => {
            let cfg = projection.config()?;
            let rows = per_pair(&pair, |k, c, s| interference_report(c, s, &cfg).map(|r| InterferenceRow::from(&r.with_key(k))))?;
            println!("{}", cfg.summary());
            println!("{:<60} {:>12} {:>12} {:>12}", "layer", "ratio", "residual", "attenuation");
            for r in &rows {
                println!("{:<60} {:>12.6e} {:>12.6e} {:>12.6e}", r.layer_key, r.ratio, r.normalized_residual, r.attenuation);
            }
            let config = merged_config(&pair, &projection);
            let doc = Document::new(ReportKind::Interference, config, pair_inputs(&pair), rows);
            if let Some(p) = &pair.out.json {
                doc.write_json(p)?;
            }
            if let Some(p) = &pair.out.csv {
                report::write_csv(p, &doc.records)?;
            }
        }
        AnalyzeCommand::Colinearity { pair, k } => {
            let rows = per_pair(&pair, |key, c, s| {
                colinearity_test(c, s, k).map(|residual| ColinearityRow {
                    layer_key: key.to_string(),
                    residual,
                })
            })?;
            for r in &rows {
                println!("{:<60} {:.6e}", r.layer_key, r.residual);
            }
            let mut config = config_of(&pair);
            config.insert("k".into(), k.to_string().into());
            let doc = Document::new(ReportKind::Colinearity, config, pair_inputs(&pair), rows);
            if let Some(p) = &pair.out.json {
                doc.write_json(p)?;
            }
            if let Some(p) = &pair.out.csv {
                report::write_csv(p, &doc.records)?;
            }
        }
        AnalyzeCommand::CompareUv { pair, projection } => {
            let cfg = projection.config()?;
            let rows = per_pair(&pair, |key, c, s| {
                compare_uv_projection(c, s, &cfg).map(|(v, u)| CompareUvRow {
                    layer_key: key.to_string(),
                    v_space: InterferenceRow::from(&v.with_key(key)),
                    u_space: InterferenceRow::from(&u.with_key(key)),
                })
            })?;
            println!("{}", cfg.summary());
            println!("{:<60} {:>14} {:>14}", "layer", "V residual", "U residual");
            for r in &rows {
                println!(
                    "{:<60} {:>14.6e} {:>14.6e}",
                    r.layer_key, r.v_space.normalized_residual, r.u_space.normalized_residual
                );
            }
            let config = merged_config(&pair, &projection);
            let doc = Document::new(ReportKind::CompareUv, config, pair_inputs(&pair), rows);
            if let Some(p) = &pair.out.json {
                doc.write_json(p)?;
            }
            if let Some(p) = &pair.out.csv {
                report::write_compare_uv_csv(p, &doc.records)?;
            }
        }
        AnalyzeCommand::Perturb(args) => {
            let pairing = args.pairing.pairing()?;
            let ckpt = load(&args.path, &pairing)?;
            let layers: Vec<_> = ckpt.layers.iter().collect();
            let rows = with_threads(args.out.threads, || {
                layers
                    .par_iter()
                    .map(|(key, layer)| perturb_rows(key, layer, &args))
                    .collect::<nullfuse_core::Result<Vec<_>>>()
            })??;
            let rows: Vec<PerturbRow> = rows.into_iter().flatten().collect();
            println!("{:<60} {:>5} {:>12} {:>14}", "layer", "index", "sigma", "change");
            for r in &rows {
                println!("{:<60} {:>5} {:>12.4e} {:>14.6e}", r.layer_key, r.index, r.singular_value, r.frobenius_change);
            }
            let doc = Document::new(ReportKind::Perturb, config_of(&args), vec![args.path.display().to_string()], rows);
            if let Some(p) = &args.out.json {
                doc.write_json(p)?;
            }
            if let Some(p) = &args.out.csv {
                report::write_csv(p, &doc.records)?;
            }
        }
    }
    Ok(Status::Ok)
}

fn perturb_rows(key: &str, layer: &nullfuse_core::LowRankUpdate, args: &PerturbArgs) -> nullfuse_core::Result<Vec<PerturbRow>> {
    let base = layer.dense();
    let norm = base.frob_norm();
    let sigma = layer.factored_svd()?.sigma;
    args.indices
        .iter()
        .map(|&i| {
            let p = perturb_directions(layer, &[i], args.epsilon, args.seed)?;
            let change = p.dense().sub(&base)?.frob_norm();
            Ok(PerturbRow {
                layer_key: key.to_string(),
                index: i,
                singular_value: sigma[i],
                epsilon: args.epsilon,
                seed: args.seed,
                frobenius_change: change,
                relative_change: if norm == 0.0 { 0.0 } else { change / norm },
            })
        })
        .collect()
}

pub fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<Status> {
    let cfg = verify::VerifyConfig {
        seed: args.seed,
        n: args.n,
        rank: args.rank,
        trials: args.trials,
        inject_fault: args.inject_fault,
    };
    let results = verify::run(&cfg)?;
    print!("{}", verify::table(&results));
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!(
            "invariant `{}` violated: error {:.3e} > {:.0e} (seed {})",
            r.check,
            r.max_error,
            r.tolerance,
            r.failing_seed.map_or("?".to_string(), |s| s.to_string())
        );
    }
    if let Some(p) = &args.json {
        Document::new(ReportKind::Verify, config_of(args), Vec::new(), results.clone()).write_json(p)?;
    }
    Ok(if failed.is_empty() { Status::Ok } else { Status::ChecksFailed })
}

pub fn cmd_bench(args: &BenchArgs) -> anyhow::Result<Status> {
    let result = bench::run(&bench::BenchConfig {
        m: args.m,
        n: args.n,
        rank: args.rank,
        repeats: args.repeats,
        seed: args.seed,
    })?;
    print!("{}", bench::table(&result));
    if let Some(p) = &args.json {
        Document::new(ReportKind::Bench, config_of(args), Vec::new(), vec![result]).write_json(p)?;
    }
    Ok(Status::Ok)
}
