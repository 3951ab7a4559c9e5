//! Reading, merging and analyzing low-rank adapter checkpoints.
//!
//! The numerical work lives in [`nullfuse_core`]; this crate adds the
//! safetensors container, layer-parallel merging, reports and the CLI.

pub mod bench;
pub mod cli;
pub mod io;
pub mod merge;
pub mod report;
pub mod synth;
pub mod verify;

pub use io::{parse_checkpoint, read_checkpoint, serialize_checkpoint, write_checkpoint, CheckpointError, KeyPairing, Stage};
pub use nullfuse_core as core;
