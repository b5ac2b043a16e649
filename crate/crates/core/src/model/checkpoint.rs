use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ParamStore};
use crate::archive::Archive;
use crate::error::{DattaError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FILE: &str = "model.ntar";

/// Writes `model.ntar` into `dir`, creating the directory if needed.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let named = model
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    let archive = Archive::new(
        "model",
        model.config().hash(),
        serde_json::to_value(model.config())?,
        named,
    );
    archive.save(dir.join(CHECKPOINT_FILE))
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let archive = Archive::<T>::load(dir.as_ref().join(CHECKPOINT_FILE))?;
    if archive.manifest.kind != "model" {
        return Err(DattaError::Format(format!("archive kind `{}` is not a model", archive.manifest.kind)));
    }
    let config: ModelConfig = serde_json::from_value(archive.manifest.metadata.clone())?;
    if config.hash() != archive.manifest.config_hash {
        return Err(DattaError::Format("checkpoint config hash does not match its config".into()));
    }
    let template = Model::<T>::new(config.clone(), 0)?;
    let mut params = ParamStore::new();
    for ((_, p), (entry, t)) in template
        .params()
        .iter()
        .zip(archive.manifest.tensors.iter().zip(archive.tensors))
    {
        if p.name != entry.name {
            return Err(DattaError::Format(format!("expected tensor `{}`, found `{}`", p.name, entry.name)));
        }
        params.add(entry.name.clone(), p.group, t);
    }
    Model::from_params(config, params)
}
