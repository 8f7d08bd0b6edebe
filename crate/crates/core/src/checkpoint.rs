//! Versioned checkpoint manifests: the model config plus every named
//! parameter tensor with its shape. Write → read → write is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VlmModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config: ModelConfig,
    params: Vec<ManifestParam>,
}

pub fn save(model: &VlmModel, path: &Path) -> Result<()> {
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|p| ManifestParam {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&manifest)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<VlmModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint schema {}",
            manifest.schema_version
        )));
    }
    let mut model = VlmModel::new(manifest.config)?;
    let expected = model.params.len();
    if manifest.params.len() != expected {
        return Err(Error::data(format!(
            "checkpoint has {} params, model expects {expected}",
            manifest.params.len()
        )));
    }
    for mp in manifest.params {
        let param = model
            .params
            .get_mut(&mp.name)
            .ok_or_else(|| Error::data(format!("unknown parameter '{}'", mp.name)))?;
        if param.tensor.shape() != mp.shape.as_slice() {
            return Err(Error::data(format!(
                "parameter '{}' has shape {:?}, expected {:?}",
                mp.name,
                mp.shape,
                param.tensor.shape()
            )));
        }
        param.tensor = Tensor::new(mp.shape, mp.data)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::{StrategyConfig, StrategyTag};

    #[test]
    fn manifest_round_trips_byte_identically() {
        let mut s = StrategyConfig::new(StrategyTag::Victor);
        s.m = 2;
        s.k = 1;
        let model = VlmModel::new(ModelConfig::tiny(s)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save(&model, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
        for (x, y) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(x.name, y.name);
            assert!(x.tensor.bit_eq(&y.tensor));
        }
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let model = VlmModel::new(ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline)))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&model, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // Corrupt one shape.
        text = text.replacen("\"shape\":[4,8]", "\"shape\":[8,4]", 1);
        std::fs::write(&path, text).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let err = load(Path::new("/nonexistent/checkpoint.json")).unwrap_err();
        assert!(err.to_string().contains("nonexistent"));
    }
}
