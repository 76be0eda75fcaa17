//! Model checkpoints: every named parameter tensor in the array container,
//! plus a JSON metadata entry describing the model layout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fluxblock::{ModelParams, SpectralHyper};
use crate::io::{decode_json_entry, encode_json_entry, read_arrays, write_arrays, NamedArray};

/// Reserved container entry holding the JSON metadata, one byte per element.
pub const META_ENTRY: &str = "__meta_json__";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub hyper: SpectralHyper,
    pub k_c: usize,
    pub with_corrector: bool,
    /// Flow-system name the model was trained for.
    pub kind: String,
    pub seed: u64,
    /// Optimizer steps taken to produce these parameters.
    pub step: u64,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut arrays = vec![encode_json_entry(META_ENTRY, meta)?];
    for (name, t) in params.named_tensors() {
        arrays.push(NamedArray::new(name, t.clone()));
    }
    write_arrays(path, &arrays)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let arrays = read_arrays(path)?;
    let meta_arr = arrays
        .iter()
        .find(|a| a.name == META_ENTRY)
        .ok_or_else(|| Error::MalformedContainer("missing metadata entry".into()))?;
    let meta: CheckpointMeta = decode_json_entry(meta_arr)?;

    let mut params = ModelParams::zeros(meta.hyper, meta.k_c, meta.with_corrector)?;
    let mut used = 1usize;
    for (name, t) in params.named_tensors_mut() {
        let entry = arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::MalformedContainer(format!("missing tensor {name}")))?;
        if entry.data.shape() != t.shape() {
            return Err(Error::MalformedContainer(format!(
                "tensor {name}: stored shape {:?} does not match expected {:?}",
                entry.data.shape(),
                t.shape()
            )));
        }
        t.assign(&entry.data);
        used += 1;
    }
    if used != arrays.len() {
        return Err(Error::MalformedContainer(format!(
            "container holds {} entries but the model layout expects {used}",
            arrays.len()
        )));
    }
    params.check_finite()?;
    Ok((params, meta))
}
