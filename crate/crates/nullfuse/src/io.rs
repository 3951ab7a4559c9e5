//! Adapter checkpoints in the safetensors container.
//!
//! Parsing and header validation go through the `safetensors` crate. Writing
//! is done here so that the header bytes are fully deterministic: keys are
//! emitted in lexicographic order with `__metadata__` first, the header is
//! space-padded to a multiple of eight and tensor data follows contiguously.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use nullfuse_core::fusion::{LayerPair, MergePlan};
use nullfuse_core::{AdapterCheckpoint, Dtype, LowRankUpdate, Matrix};
use regex::Regex;
use safetensors::tensor::TensorView;
use safetensors::{SafeTensorError, SafeTensors};

pub const TOOL_NAME: &str = "nullfuse";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stage of checkpoint handling that failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Io,
    Header,
    Json,
    Offsets,
    Dtype,
    Pairing,
    Shape,
    Write,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Io => "io",
            Stage::Header => "header",
            Stage::Json => "json",
            Stage::Offsets => "offsets",
            Stage::Dtype => "dtype",
            Stage::Pairing => "pairing",
            Stage::Shape => "shape",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("invalid header JSON: {0}")]
    Json(String),
    #[error("invalid tensor offsets: {0}")]
    Offsets(String),
    #[error("tensor `{tensor}` has unsupported dtype {dtype}")]
    Dtype { tensor: String, dtype: String },
    #[error("layer `{stem}` has no {missing} factor")]
    Unpaired { stem: String, missing: &'static str },
    #[error("layer `{stem}` matches more than one {factor} tensor")]
    DuplicateFactor { stem: String, factor: &'static str },
    #[error("layer `{stem}`: {detail}")]
    Shape { stem: String, detail: String },
    #[error("cannot write: {0}")]
    Write(String),
}

impl CheckpointError {
    pub fn stage(&self) -> Stage {
        match self {
            CheckpointError::Io { .. } => Stage::Io,
            CheckpointError::Header(_) => Stage::Header,
            CheckpointError::Json(_) => Stage::Json,
            CheckpointError::Offsets(_) => Stage::Offsets,
            CheckpointError::Dtype { .. } => Stage::Dtype,
            CheckpointError::Unpaired { .. } | CheckpointError::DuplicateFactor { .. } => Stage::Pairing,
            CheckpointError::Shape { .. } => Stage::Shape,
            CheckpointError::Write(_) => Stage::Write,
        }
    }
}

impl From<SafeTensorError> for CheckpointError {
    fn from(e: SafeTensorError) -> Self {
        use SafeTensorError as E;
        let msg = format!("{e:?}");
        match e {
            E::InvalidHeader | E::InvalidHeaderStart | E::HeaderTooLarge | E::HeaderTooSmall | E::InvalidHeaderLength => {
                CheckpointError::Header(msg)
            }
            E::InvalidHeaderDeserialization | E::JsonError(_) => CheckpointError::Json(msg),
            E::IoError(source) => CheckpointError::Io {
                path: PathBuf::new(),
                source,
            },
            _ => CheckpointError::Offsets(msg),
        }
    }
}

/// Tensor-name conventions for recognizing adapter factors.
#[derive(Debug, Clone)]
pub struct KeyPairing {
    /// Suffixes of up-factor tensors; the first one is used when writing.
    pub up_suffixes: Vec<String>,
    /// Down-factor suffixes, aligned with `up_suffixes`.
    pub down_suffixes: Vec<String>,
    pub alpha_suffix: Option<String>,
    /// Applied in order to layer stems before cross-checkpoint pairing.
    pub stem_rewrites: Vec<(Regex, String)>,
}

impl Default for KeyPairing {
    fn default() -> Self {
        Self {
            up_suffixes: vec!["lora_up.weight".into(), "lora_B.weight".into()],
            down_suffixes: vec!["lora_down.weight".into(), "lora_A.weight".into()],
            alpha_suffix: Some("alpha".into()),
            stem_rewrites: Vec::new(),
        }
    }
}

impl KeyPairing {
    pub fn new(up_suffixes: Vec<String>, down_suffixes: Vec<String>, alpha_suffix: Option<String>) -> Result<Self, String> {
        if up_suffixes.is_empty() || up_suffixes.len() != down_suffixes.len() {
            return Err(format!(
                "need equally many up and down suffixes (got {} and {})",
                up_suffixes.len(),
                down_suffixes.len()
            ));
        }
        Ok(Self {
            up_suffixes,
            down_suffixes,
            alpha_suffix,
            stem_rewrites: Vec::new(),
        })
    }

    /// Adds a rewrite from `PATTERN=>REPLACEMENT` (regex syntax, `$1` captures).
    pub fn with_rewrite(mut self, rule: &str) -> Result<Self, String> {
        let (pattern, replacement) = rule
            .split_once("=>")
            .ok_or_else(|| format!("rewrite `{rule}` is not of the form PATTERN=>REPLACEMENT"))?;
        let re = Regex::new(pattern).map_err(|e| format!("rewrite pattern `{pattern}`: {e}"))?;
        self.stem_rewrites.push((re, replacement.to_string()));
        Ok(self)
    }

    pub fn rewrite(&self, stem: &str) -> String {
        let mut out = stem.to_string();
        for (re, rep) in &self.stem_rewrites {
            out = re.replace_all(&out, rep.as_str()).into_owned();
        }
        out
    }

    fn split<'a>(name: &'a str, suffix: &str) -> Option<&'a str> {
        name.strip_suffix(suffix)?.strip_suffix('.').filter(|s| !s.is_empty())
    }

    fn classify<'a>(&self, name: &'a str) -> Option<(Role, &'a str)> {
        for (up, down) in self.up_suffixes.iter().zip(&self.down_suffixes) {
            if let Some(stem) = Self::split(name, up) {
                return Some((Role::Up, stem));
            }
            if let Some(stem) = Self::split(name, down) {
                return Some((Role::Down, stem));
            }
        }
        let alpha = self.alpha_suffix.as_deref()?;
        Self::split(name, alpha).map(|stem| (Role::Alpha, stem))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Up,
    Down,
    Alpha,
}

/// A parsed checkpoint plus tensors that were ignored.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub checkpoint: AdapterCheckpoint,
    pub warnings: Vec<String>,
}

fn map_dtype(name: &str, dtype: safetensors::Dtype) -> Result<Dtype, CheckpointError> {
    match dtype {
        safetensors::Dtype::F32 => Ok(Dtype::F32),
        safetensors::Dtype::F16 => Ok(Dtype::F16),
        safetensors::Dtype::BF16 => Ok(Dtype::BF16),
        other => Err(CheckpointError::Dtype {
            tensor: name.to_string(),
            dtype: format!("{other:?}"),
        }),
    }
}

/// Widens stored values to `f64` exactly.
fn widen(dtype: Dtype, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
    }
}

/// `[rows, cols]` of a factor, accepting trailing unit dimensions (1×1 convolutions).
fn matrix_shape(stem: &str, name: &str, shape: &[usize]) -> Result<(usize, usize), CheckpointError> {
    let bad = || CheckpointError::Shape {
        stem: stem.to_string(),
        detail: format!("tensor `{name}` has shape {shape:?}, expected a matrix"),
    };
    if shape.len() < 2 || shape[2..].iter().any(|&d| d != 1) {
        return Err(bad());
    }
    if shape[0] == 0 || shape[1] == 0 {
        return Err(bad());
    }
    Ok((shape[0], shape[1]))
}

fn to_matrix(stem: &str, name: &str, view: &TensorView<'_>) -> Result<(Matrix, Dtype), CheckpointError> {
    let dtype = map_dtype(name, view.dtype())?;
    let (rows, cols) = matrix_shape(stem, name, view.shape())?;
    let data = widen(dtype, view.data());
    let m = Matrix::new(rows, cols, data).map_err(|e| CheckpointError::Shape {
        stem: stem.to_string(),
        detail: format!("tensor `{name}`: {e}"),
    })?;
    Ok((m, dtype))
}

#[derive(Default)]
struct Parts<'a> {
    up: Option<(&'a str, TensorView<'a>)>,
    down: Option<(&'a str, TensorView<'a>)>,
    alpha: Option<(&'a str, TensorView<'a>)>,
}

/// Parses a complete container held in memory.
pub fn parse_checkpoint(bytes: &[u8], pairing: &KeyPairing) -> Result<Loaded, CheckpointError> {
    let (_, meta) = SafeTensors::read_metadata(bytes)?;
    let tensors = SafeTensors::deserialize(bytes)?;
    let mut warnings = Vec::new();

    let mut stems: BTreeMap<&str, Parts<'_>> = BTreeMap::new();
    let mut names: Vec<&str> = tensors.names().into_iter().map(String::as_str).collect();
    names.sort_unstable();
    for name in names {
        let view = tensors.tensor(name)?;
        let Some((role, stem)) = pairing.classify(name) else {
            warnings.push(format!("ignoring tensor `{name}`: no adapter suffix"));
            continue;
        };
        let parts = stems.entry(stem).or_default();
        let (slot, factor) = match role {
            Role::Up => (&mut parts.up, "up"),
            Role::Down => (&mut parts.down, "down"),
            Role::Alpha => (&mut parts.alpha, "alpha"),
        };
        if slot.is_some() {
            return Err(CheckpointError::DuplicateFactor {
                stem: stem.to_string(),
                factor,
            });
        }
        *slot = Some((name, view));
    }

    let mut ckpt = AdapterCheckpoint::new(Dtype::F32);
    let mut first_dtype = None;
    for (stem, parts) in stems {
        let (up, down) = match (parts.up, parts.down) {
            (Some(u), Some(d)) => (u, d),
            (None, None) => {
                warnings.push(format!("ignoring alpha for `{stem}`: no factors"));
                continue;
            }
            (Some(_), None) => {
                return Err(CheckpointError::Unpaired {
                    stem: stem.to_string(),
                    missing: "down",
                })
            }
            (None, Some(_)) => {
                return Err(CheckpointError::Unpaired {
                    stem: stem.to_string(),
                    missing: "up",
                })
            }
        };
        let (up_m, dtype) = to_matrix(stem, up.0, &up.1)?;
        let (down_m, _) = to_matrix(stem, down.0, &down.1)?;
        first_dtype.get_or_insert(dtype);
        let rank = up_m.cols();
        let scale = match parts.alpha {
            None => 1.0,
            Some((name, view)) => {
                let dtype = map_dtype(name, view.dtype())?;
                if view.shape().iter().product::<usize>() != 1 {
                    return Err(CheckpointError::Shape {
                        stem: stem.to_string(),
                        detail: format!("alpha `{name}` has shape {:?}, expected a scalar", view.shape()),
                    });
                }
                widen(dtype, view.data())[0] / rank as f64
            }
        };
        let layer = LowRankUpdate::new(up_m, down_m, scale).map_err(|e| CheckpointError::Shape {
            stem: stem.to_string(),
            detail: e.to_string(),
        })?;
        ckpt.insert(stem, layer);
    }
    ckpt.source_dtype = first_dtype.unwrap_or_default();
    if let Some(md) = meta.metadata() {
        ckpt.metadata = md.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    }
    Ok(Loaded {
        checkpoint: ckpt,
        warnings,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>, pairing: &KeyPairing) -> Result<Loaded, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let loaded = parse_checkpoint(&bytes, pairing)?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(loaded)
}

fn dtype_tag(dtype: Dtype) -> &'static str {
    match dtype {
        Dtype::F32 => "F32",
        Dtype::F16 => "F16",
        Dtype::BF16 => "BF16",
    }
}

fn encode(name: &str, values: &[f64], dtype: Dtype, out: &mut Vec<u8>) -> Result<(), CheckpointError> {
    let non_finite = || CheckpointError::Write(format!("tensor `{name}` has values not representable as {dtype}"));
    match dtype {
        Dtype::F32 => {
            for &v in values {
                let x = v as f32;
                if !x.is_finite() {
                    return Err(non_finite());
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Dtype::F16 => {
            for &v in values {
                let x = f16::from_f64(v);
                if !x.is_finite() {
                    return Err(non_finite());
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Dtype::BF16 => return Err(CheckpointError::Write("bf16 output is not supported".into())),
    }
    Ok(())
}

/// Stored alpha for a layer, or `None` when the scale is one.
fn alpha_of(layer: &LowRankUpdate) -> Option<f64> {
    (layer.scale() != 1.0).then(|| layer.scale() * layer.rank() as f64)
}

/// Serializes to container bytes. Adds tool name and version to the metadata.
pub fn serialize_checkpoint(ckpt: &AdapterCheckpoint, dtype: Dtype, pairing: &KeyPairing) -> Result<Vec<u8>, CheckpointError> {
    if dtype == Dtype::BF16 {
        return Err(CheckpointError::Write("bf16 output is not supported".into()));
    }
    let up_suffix = &pairing.up_suffixes[0];
    let down_suffix = &pairing.down_suffixes[0];

    // name -> (shape, values)
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (stem, layer) in &ckpt.layers {
        let up = layer.up();
        let down = layer.down();
        entries.insert(format!("{stem}.{up_suffix}"), (vec![up.rows(), up.cols()], up.as_slice().to_vec()));
        entries.insert(format!("{stem}.{down_suffix}"), (vec![down.rows(), down.cols()], down.as_slice().to_vec()));
        if let Some(alpha) = alpha_of(layer) {
            let suffix = pairing
                .alpha_suffix
                .as_deref()
                .ok_or_else(|| CheckpointError::Write(format!("layer `{stem}` has scale {} but no alpha suffix is configured", layer.scale())))?;
            entries.insert(format!("{stem}.{suffix}"), (Vec::new(), vec![alpha]));
        }
    }
    if entries.len() != 2 * ckpt.len() + ckpt.layers.values().filter(|l| alpha_of(l).is_some()).count() {
        return Err(CheckpointError::Write("layer keys collide after adding suffixes".into()));
    }

    let mut metadata = ckpt.metadata.clone();
    metadata.insert(format!("{TOOL_NAME}.tool"), TOOL_NAME.into());
    metadata.insert(format!("{TOOL_NAME}.version"), TOOL_VERSION.into());

    let json = |s: &str| serde_json::to_string(s).expect("strings serialize");
    let mut data = Vec::new();
    let mut header = String::from("{\"__metadata__\":{");
    for (i, (k, v)) in metadata.iter().enumerate() {
        if i > 0 {
            header.push(',');
        }
        let _ = write!(header, "{}:{}", json(k), json(v));
    }
    header.push('}');
    for (name, (shape, values)) in &entries {
        let start = data.len();
        encode(name, values, dtype, &mut data)?;
        let shape: Vec<String> = shape.iter().map(usize::to_string).collect();
        let _ = write!(
            header,
            ",{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            json(name),
            dtype_tag(dtype),
            shape.join(","),
            start,
            data.len()
        );
    }
    header.push('}');
    let pad = (8 - header.len() % 8) % 8;
    header.extend(std::iter::repeat(' ').take(pad));

    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn write_checkpoint(ckpt: &AdapterCheckpoint, path: impl AsRef<Path>, dtype: Dtype, pairing: &KeyPairing) -> Result<(), CheckpointError> {
    let bytes = serialize_checkpoint(ckpt, dtype, pairing)?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Pairs layers whose stems agree after `pairing.stem_rewrites`. Output keys
/// are the style checkpoint's original keys. When several stems of one side
/// rewrite to the same name, only the first (in key order) takes part in the
/// pairing; the rest are reported as unpaired.
pub fn pair_layers<'a>(content: &'a AdapterCheckpoint, style: &'a AdapterCheckpoint, pairing: &KeyPairing) -> MergePlan<'a> {
    let mut style_by_stem: BTreeMap<String, (&'a str, &'a LowRankUpdate)> = BTreeMap::new();
    let mut plan = MergePlan::default();
    for (key, layer) in &style.layers {
        match style_by_stem.entry(pairing.rewrite(key)) {
            std::collections::btree_map::Entry::Occupied(_) => plan.style_only.push((key.clone(), layer)),
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert((key.as_str(), layer));
            }
        }
    }
    let mut used = std::collections::BTreeSet::new();
    for (key, layer) in &content.layers {
        let stem = pairing.rewrite(key);
        match style_by_stem.get(&stem) {
            Some(&(style_key, style_layer)) if used.insert(stem.clone()) => plan.pairs.push(LayerPair {
                key: style_key.to_string(),
                content: layer,
                style: style_layer,
            }),
            _ => plan.content_only.push((key.clone(), layer)),
        }
    }
    for (stem, (key, layer)) in &style_by_stem {
        if !used.contains(stem) {
            plan.style_only.push((key.to_string(), layer));
        }
    }
    plan.pairs.sort_by(|a, b| a.key.cmp(&b.key));
    plan.style_only.sort_by(|a, b| a.0.cmp(&b.0));
    plan
}
