use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::linalg::LowRankUpdate;

/// Storage precision of tensors in a checkpoint file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Dtype {
    #[default]
    F32,
    F16,
    BF16,
}

impl core::fmt::Display for Dtype {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
            Dtype::BF16 => "bf16",
        })
    }
}

/// Per-layer adapter updates keyed by layer stem, iterated in lexicographic order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterCheckpoint {
    pub layers: BTreeMap<String, LowRankUpdate>,
    pub metadata: BTreeMap<String, String>,
    pub source_dtype: Dtype,
}

impl AdapterCheckpoint {
    pub fn new(source_dtype: Dtype) -> Self {
        Self {
            source_dtype,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, layer: LowRankUpdate) -> Option<LowRankUpdate> {
        self.layers.insert(key.into(), layer)
    }

    pub fn get(&self, key: &str) -> Option<&LowRankUpdate> {
        self.layers.get(key)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }
}
