//! Model checkpoints: one tensor file per layer plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, Model, Normalizer};
use crate::chip::HwParams;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "anamac-checkpoint";

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    kind: LayerKind,
    hw: HwParams,
    weights: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    n_classes: usize,
    input_scale: f32,
    normalizer: Option<Normalizer>,
    layers: Vec<LayerEntry>,
}

/// Writes `dir/manifest.json` and `dir/layer<i>.atns`.
pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let name = format!("layer{i}.atns");
        write_tensor(&l.weights, dir.join(&name))?;
        layers.push(LayerEntry { kind: l.kind.clone(), hw: l.hw, weights: name });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        n_classes: model.n_classes,
        input_scale: model.input_scale,
        normalizer: model.normalizer.clone(),
        layers,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Accepts the manifest path or its directory.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let m: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::InvalidConfig(format!("unsupported checkpoint {} v{}", m.format, m.version)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(m.layers.len());
    for e in m.layers {
        let weights = read_tensor(dir.join(&e.weights))?;
        weights.as_f32()?;
        e.hw.validate()?;
        layers.push(Layer { kind: e.kind, weights, hw: e.hw });
    }
    let model = Model { layers, n_classes: m.n_classes, input_scale: m.input_scale, normalizer: m.normalizer };
    model.validate()?;
    Ok(model)
}
