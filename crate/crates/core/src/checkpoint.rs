//! Checkpoints: a JSON manifest next to a flat little-endian `f64` file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::segnet::{NetConfig, Params};
use crate::trainer::{MetricRecord, ModelSet, TrainState};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const TENSOR_FILE: &str = "tensors.bin";
const FORMAT: &str = "nightseg-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    iter: usize,
    seed: u64,
    net: NetConfig,
    /// Parameters first, then momentum buffers, in this order in the data file.
    tensors: Vec<TensorEntry>,
    history: Vec<MetricRecord>,
}

fn entries(prefix: &str, p: &ModelSet) -> Vec<TensorEntry> {
    p.tensors()
        .into_iter()
        .map(|(name, t)| TensorEntry {
            name: format!("{prefix}{name}"),
            len: t.len(),
        })
        .collect()
}

pub fn save(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = entries("", &state.models);
    tensors.extend(entries("velocity.", &state.velocity));
    let manifest = Manifest {
        format: FORMAT.to_string(),
        iter: state.iter,
        seed: state.seed,
        net: state.models.m_n.config,
        tensors,
        history: state.history.clone(),
    };
    let mut bytes = Vec::with_capacity(8 * 2 * state.models.num_params());
    for set in [&state.models, &state.velocity] {
        for (_, t) in set.tensors() {
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(dir.join(TENSOR_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<TrainState> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(validation(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    let bytes = fs::read(dir.join(TENSOR_FILE))?;
    let mut models = ModelSet::zeros(manifest.net);
    let mut velocity = ModelSet::zeros(manifest.net);
    let mut expected = entries("", &models);
    expected.extend(entries("velocity.", &velocity));
    let same = expected.len() == manifest.tensors.len()
        && expected
            .iter()
            .zip(&manifest.tensors)
            .all(|(a, b)| a.name == b.name && a.len == b.len);
    if !same {
        return Err(validation("checkpoint tensor table does not match the network layout"));
    }
    let total: usize = expected.iter().map(|e| e.len).sum();
    if bytes.len() != 8 * total {
        return Err(validation(format!(
            "checkpoint data holds {} bytes, expected {}",
            bytes.len(),
            8 * total
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for set in [&mut models, &mut velocity] {
        for (_, t) in set.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
    }
    Ok(TrainState {
        iter: manifest.iter,
        seed: manifest.seed,
        models,
        velocity,
        history: manifest.history,
    })
}
