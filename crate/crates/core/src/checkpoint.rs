//! Checkpoints: one NPY per parameter plus a `manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{MedNextPredictor, Predictor};
use crate::mednext::{self, MedNextConfig};
use crate::params::{Init, ParamTree};
use crate::trainkit::{MicroConfig, MicroPredictor};
use crate::volio::{read_npy, write_npy, NpyArray, NpyData};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    MedNext(MedNextConfig),
    Micro(MicroConfig),
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<ParamTree> {
        match self {
            ModelSpec::MedNext(c) => mednext::build_model(c, seed),
            ModelSpec::Micro(c) => c.build(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelSpec,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn file_name(idx: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{idx:04}_{clean}.npy")
}

pub fn save_checkpoint(dir: impl AsRef<Path>, params: &ParamTree, model: &ModelSpec, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (idx, (name, e)) in params.iter().enumerate() {
        let file = file_name(idx, name);
        let arr = NpyArray::new(e.shape().to_vec(), NpyData::F32(e.values().to_vec()))?;
        write_npy(&arr, dir.join(&file))?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            file,
            shape: e.shape().to_vec(),
            frozen: e.frozen,
            init: e.init,
        });
    }
    let m = Manifest {
        model: model.clone(),
        seed,
        entries,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&m).expect("manifest serializes")).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Loads the tree and checks it has exactly the layout `model` builds.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ParamTree, Manifest)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let mut p = ParamTree::new();
    for e in &m.entries {
        let arr = read_npy(dir.join(&e.file))?;
        if arr.shape != e.shape {
            return Err(Error::Shape(format!("{}: file shape {:?} vs manifest {:?}", e.name, arr.shape, e.shape)));
        }
        let NpyData::F32(values) = arr.data else {
            return Err(Error::Shape(format!("{}: expected float32 values", e.name)));
        };
        p.insert(e.name.clone(), e.shape.clone(), values, e.init)?;
        p.get_mut(&e.name).expect("just inserted").frozen = e.frozen;
    }
    let reference = m.model.build(0)?;
    let layout = |t: &ParamTree| t.iter().map(|(n, e)| (n.to_string(), e.shape().to_vec())).collect::<Vec<_>>();
    if layout(&reference) != layout(&p) {
        return Err(Error::Shape(format!(
            "checkpoint {} does not match its model configuration",
            dir.display()
        )));
    }
    Ok((p, m))
}

/// A predictor for the checkpoint's architecture with the given window.
pub fn load_predictor(dir: impl AsRef<Path>, window: [usize; 3]) -> Result<Box<dyn Predictor>> {
    let (params, m) = load_checkpoint(dir)?;
    Ok(match m.model {
        ModelSpec::MedNext(config) => Box::new(MedNextPredictor::new(params, config, window)?),
        ModelSpec::Micro(config) => Box::new(MicroPredictor { params, config, window }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_architectures() {
        let dir = tempfile::tempdir().unwrap();
        for (i, spec) in [ModelSpec::MedNext(MedNextConfig::tiny(2)), ModelSpec::Micro(MicroConfig::default())]
            .into_iter()
            .enumerate()
        {
            let d = dir.path().join(i.to_string());
            let mut p = spec.build(7).unwrap();
            let first = p.names().next().unwrap().to_string();
            p.get_mut(&first).unwrap().frozen = true;
            save_checkpoint(&d, &p, &spec, 7).unwrap();
            let (q, m) = load_checkpoint(&d).unwrap();
            assert_eq!(q, p);
            assert_eq!(m.model, spec);
            assert_eq!(m.seed, 7);
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = MicroConfig::default().build(1).unwrap();
        let wrong = ModelSpec::Micro(MicroConfig { hidden: 8, ..Default::default() });
        save_checkpoint(dir.path(), &p, &wrong, 1).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
