//! Parameter checkpoints: a directory of tensor dumps plus a JSON
//! manifest listing names, shapes, and the model configuration.

use std::fs;
use std::path::Path;

use adastate_tensor::{read_tensor, write_tensor, Tensor};
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelParams};
use crate::{CoreError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub iteration: usize,
    pub alpha: f64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub struct Checkpoint {
    pub generator: ModelParams,
    pub critic: ModelParams,
    pub ema: ModelParams,
    pub iteration: usize,
    pub alpha: f64,
}

fn file_name(name: &str) -> String {
    format!("{}.adst", name.replace('.', "_"))
}

pub fn save_checkpoint(
    dir: &Path,
    generator: &ModelParams,
    critic: &ModelParams,
    ema: &ModelParams,
    iteration: usize,
    alpha: f64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (role, params) in [("generator", generator), ("critic", critic), ("ema", ema)] {
        for (name, tensor) in params.named() {
            let full = format!("{role}.{name}");
            let file = file_name(&full);
            write_tensor(&dir.join(&file), tensor)?;
            entries.push(TensorEntry {
                name: full,
                shape: tensor.shape().to_vec(),
                file,
            });
        }
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        model: generator.config.clone(),
        iteration,
        alpha,
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

fn load_role(
    dir: &Path,
    manifest: &CheckpointManifest,
    role: &str,
) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(&manifest.model);
    let mut loaded = 0usize;
    let prefix = format!("{role}.");
    let by_name: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    for (name, tensor) in params.named_mut() {
        let full = format!("{prefix}{name}");
        let entry = by_name.get(full.as_str()).ok_or_else(|| {
            CoreError::Checkpoint(format!("manifest is missing tensor {full}"))
        })?;
        let value: Tensor = read_tensor(&dir.join(&entry.file))?;
        if value.shape() != tensor.shape() {
            return Err(CoreError::Checkpoint(format!(
                "{full}: dump shape {:?} != model shape {:?}",
                value.shape(),
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(value.data());
        loaded += 1;
    }
    if loaded == 0 {
        return Err(CoreError::Checkpoint(format!("no tensors for role {role}")));
    }
    Ok(params)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        CoreError::Checkpoint(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != 1 {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    Ok(Checkpoint {
        generator: load_role(dir, &manifest, "generator")?,
        critic: load_role(dir, &manifest, "critic")?,
        ema: load_role(dir, &manifest, "ema")?,
        iteration: manifest.iteration,
        alpha: manifest.alpha,
    })
}
