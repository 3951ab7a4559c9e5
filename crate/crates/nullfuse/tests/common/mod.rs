#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use nullfuse::core::{AdapterCheckpoint, Dtype, LowRankUpdate, Matrix};
use nullfuse::synth::random_update;
use safetensors::tensor::TensorView;

/// Raw tensor for fixtures: name, dtype, shape, little-endian bytes.
pub struct Raw {
    pub name: String,
    pub dtype: safetensors::Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn f32_tensor(name: &str, shape: &[usize], values: &[f32]) -> Raw {
    Raw {
        name: name.into(),
        dtype: safetensors::Dtype::F32,
        shape: shape.to_vec(),
        bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

pub fn u16_tensor(name: &str, dtype: safetensors::Dtype, shape: &[usize], bits: &[u16]) -> Raw {
    Raw {
        name: name.into(),
        dtype,
        shape: shape.to_vec(),
        bytes: bits.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

/// Container bytes produced by the reference `safetensors` serializer.
pub fn container(tensors: &[Raw]) -> Vec<u8> {
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|t| (t.name.clone(), TensorView::new(t.dtype, t.shape.clone(), &t.bytes).unwrap()))
        .collect();
    safetensors::serialize(views, &None::<HashMap<String, String>>).unwrap()
}

pub fn write(path: &Path, bytes: &[u8]) {
    std::fs::write(path, bytes).unwrap();
}

/// Values exactly representable in f32.
pub fn f32_exact(m: Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) as f32 as f64)
}

pub fn random_layer(seed: u64, m: usize, n: usize, r: usize, scale: f64) -> LowRankUpdate {
    let u = random_update(&mut nullfuse::synth::rng(seed), m, n, r);
    LowRankUpdate::new(f32_exact(u.up().clone()), f32_exact(u.down().clone()), scale).unwrap()
}

/// Checkpoint of random f32-exact layers, one per key.
pub fn random_checkpoint(seed: u64, keys: &[&str], m: usize, n: usize, r: usize) -> AdapterCheckpoint {
    let mut c = AdapterCheckpoint::new(Dtype::F32);
    for (i, k) in keys.iter().enumerate() {
        c.insert(*k, random_layer(seed * 1000 + i as u64, m, n, r, 1.0));
    }
    c
}
