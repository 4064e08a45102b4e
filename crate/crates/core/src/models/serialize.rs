//! Model persistence: a structural JSON description plus a flat little-endian
//! f32 parameter blob with a name manifest. Values are truncated to single
//! precision on disk; reload-and-save round trips are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{InputSpec, Model, ModelNode, ParamSet};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::NormState;
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum BlobKind {
    #[serde(rename = "param")]
    Param,
    #[serde(rename = "norm_mean")]
    NormMean,
    #[serde(rename = "norm_var")]
    NormVar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    kind: BlobKind,
    regularizable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    inputs: Vec<InputSpec>,
    nodes: Vec<ModelNode>,
    manifest: Vec<BlobEntry>,
}

fn manifest_for(model: &Model) -> Vec<BlobEntry> {
    let mut entries = Vec::new();
    for p in model.params.iter() {
        entries.push(BlobEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            kind: BlobKind::Param,
            regularizable: p.regularizable,
        });
    }
    for (name, state) in &model.norm_states {
        entries.push(BlobEntry {
            name: name.clone(),
            shape: vec![state.mean.len()],
            kind: BlobKind::NormMean,
            regularizable: false,
        });
        entries.push(BlobEntry {
            name: name.clone(),
            shape: vec![state.var.len()],
            kind: BlobKind::NormVar,
            regularizable: false,
        });
    }
    entries
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Write `model.json` + `model.bin` style files at the given paths.
pub fn save_model(model: &Model, json_path: &Path, bin_path: &Path) -> Result<()> {
    let manifest = manifest_for(model);
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        config: model.config.clone(),
        inputs: model.inputs.clone(),
        nodes: model.nodes.clone(),
        manifest,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Io(format!("model json encode: {e}")))?;
    fs::write(json_path, json)?;

    let mut blob = Vec::new();
    for p in model.params.iter() {
        push_f32(&mut blob, p.value.data());
    }
    for state in model.norm_states.values() {
        push_f32(&mut blob, &state.mean);
        push_f32(&mut blob, &state.var);
    }
    fs::write(bin_path, blob)?;
    Ok(())
}

fn read_f32(blob: &[u8], offset: &mut usize, count: usize) -> Result<Vec<f64>> {
    let need = count * 4;
    if *offset + need > blob.len() {
        return Err(Error::Format {
            detail: format!("parameter blob truncated, needed {need} more bytes"),
            offset: *offset as u64,
        });
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let at = *offset + i * 4;
        let bytes: [u8; 4] = blob[at..at + 4].try_into().expect("4-byte chunk");
        out.push(f32::from_le_bytes(bytes) as f64);
    }
    *offset += need;
    Ok(out)
}

pub fn load_model(json_path: &Path, bin_path: &Path) -> Result<Model> {
    let json = fs::read_to_string(json_path)?;
    let file: ModelFile =
        serde_json::from_str(&json).map_err(|e| Error::Io(format!("model json decode: {e}")))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format {
            detail: format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            ),
            offset: 0,
        });
    }
    let blob = fs::read(bin_path)?;
    let mut offset = 0usize;
    let mut params = ParamSet::default();
    let mut norm_states: BTreeMap<String, NormState> = BTreeMap::new();
    for entry in &file.manifest {
        let count: usize = entry.shape.iter().product();
        let values = read_f32(&blob, &mut offset, count)?;
        match entry.kind {
            BlobKind::Param => {
                params.insert(
                    &entry.name,
                    Tensor::from_vec(entry.shape.clone(), values)?,
                    entry.regularizable,
                )?;
            }
            BlobKind::NormMean => {
                norm_states
                    .entry(entry.name.clone())
                    .or_insert_with(|| NormState {
                        mean: Vec::new(),
                        var: Vec::new(),
                    })
                    .mean = values;
            }
            BlobKind::NormVar => {
                norm_states
                    .entry(entry.name.clone())
                    .or_insert_with(|| NormState {
                        mean: Vec::new(),
                        var: Vec::new(),
                    })
                    .var = values;
            }
        }
    }
    if offset != blob.len() {
        return Err(Error::Format {
            detail: format!("trailing bytes in parameter blob ({} unused)", blob.len() - offset),
            offset: offset as u64,
        });
    }
    Ok(Model {
        config: file.config,
        inputs: file.inputs,
        nodes: file.nodes,
        params,
        norm_states,
    })
}
