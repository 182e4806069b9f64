//! Model checkpoints.
//!
//! A checkpoint is a single JSON document holding the architecture, the flat
//! parameter vector, and optionally the optimizer moment state. Serialization
//! is deterministic: saving, loading, and saving again produces byte-identical
//! files, and a loaded network evaluates bitwise like the original.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CertError, Result};
use crate::joint::MomentState;
use crate::net::{LayerSpec, Network};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    input_shape: Vec<usize>,
    layer_specs: Vec<LayerSpec>,
    theta: Vec<f64>,
    optimizer_state: Option<MomentState>,
}

pub fn checkpoint_to_string(net: &Network, state: Option<&MomentState>) -> Result<String> {
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        layer_specs: net.specs().to_vec(),
        theta: net.theta.clone(),
        optimizer_state: state.cloned(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn checkpoint_save(net: &Network, state: Option<&MomentState>, path: &Path) -> Result<()> {
    let mut text = checkpoint_to_string(net, state)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn checkpoint_from_str(text: &str) -> Result<(Network, Option<MomentState>)> {
    // Version gate first: a future format may not even parse as the current
    // struct, and that must surface as a version error, not a JSON error.
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CertError::Data("checkpoint has no format_version field".into()))?
        as u32;
    if found != FORMAT_VERSION {
        return Err(CertError::UnsupportedVersion { found, expected: FORMAT_VERSION });
    }
    let file: CheckpointFile = serde_json::from_value(value)?;
    let mut net = Network::new(file.layer_specs, file.input_shape)?;
    if file.theta.len() != net.num_params() {
        return Err(CertError::ShapeMismatch {
            context: "checkpoint theta",
            expected: vec![net.num_params()],
            got: vec![file.theta.len()],
        });
    }
    net.theta = file.theta;
    Ok((net, file.optimizer_state))
}

pub fn checkpoint_load(path: &Path) -> Result<(Network, Option<MomentState>)> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
