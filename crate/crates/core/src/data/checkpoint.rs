//! Checkpoint layout:
//!
//! ```text
//! dir/ensemble.json            index of member directories
//! dir/member-<i>/manifest.json architecture, tensor table, blob digest
//! dir/member-<i>/weights.bin   little-endian f32, in table order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{ParamMap, Tensor};
use crate::error::{Error, Result};
use crate::models::{Activation, Classifier, Ensemble, Layer, LayeredModel, ModelSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";
const INDEX: &str = "ensemble.json";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    byte_length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    id: String,
    spec: Option<ModelSpec>,
    input_shape: [usize; 3],
    classes: usize,
    activation: Activation,
    layers: Vec<Layer>,
    tensors: Vec<TensorEntry>,
    weights_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberEntry {
    id: String,
    dir: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleIndex {
    format_version: u32,
    members: Vec<MemberEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_version(found: u32, what: &Path) -> Result<()> {
    if found != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "{} has format version {found}, expected {CHECKPOINT_VERSION}",
            what.display()
        )));
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
}

/// Writes one model into `dir` (created if needed).
pub fn save_model(model: &LayeredModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    let mut tensors = Vec::new();
    for (name, t) in model.params() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            byte_length: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        id: model.id().to_string(),
        spec: model.spec().cloned(),
        input_shape: model.input_shape(),
        classes: model.classes(),
        activation: model.activation(),
        layers: model.layers().to_vec(),
        tensors,
        weights_sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::write(dir.join(WEIGHTS), &blob)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a model written by [`save_model`], verifying version and digest.
pub fn load_model(dir: impl AsRef<Path>) -> Result<LayeredModel> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&manifest_path)?;
    check_version(manifest.format_version, &manifest_path)?;
    let blob = fs::read(dir.join(WEIGHTS)).map_err(|e| bad(format!("{}: {e}", dir.join(WEIGHTS).display())))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.byte_length).sum();
    if blob.len() != expected {
        return Err(bad(format!("weights.bin has {} bytes, table needs {expected}", blob.len())));
    }
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.weights_sha256 {
        return Err(bad(format!(
            "weights digest {digest} does not match manifest {}",
            manifest.weights_sha256
        )));
    }
    let mut params = ParamMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(entry.byte_length).filter(|&e| e <= blob.len());
        if entry.byte_length != 4 * n || end.is_none() {
            return Err(bad(format!("tensor {} has an inconsistent table entry", entry.name)));
        }
        let data = blob[entry.offset..entry.offset + entry.byte_length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let model = LayeredModel::from_layers(
        manifest.id,
        manifest.input_shape,
        manifest.classes,
        manifest.activation,
        manifest.layers,
        params,
    )
    .map_err(|e| bad(format!("{}: {e}", manifest_path.display())))?;
    Ok(model.with_spec(manifest.spec))
}

/// Writes every member plus the ensemble index.
pub fn save_checkpoint<C: Classifier + ?Sized>(ensemble: &C, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut members = Vec::new();
    for (i, m) in ensemble.members().iter().enumerate() {
        let sub = format!("member-{i}");
        save_model(m, dir.join(&sub))?;
        members.push(MemberEntry {
            id: m.id().to_string(),
            dir: sub,
        });
    }
    let index = EnsembleIndex {
        format_version: CHECKPOINT_VERSION,
        members,
    };
    fs::write(dir.join(INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Ensemble> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX);
    let index: EnsembleIndex = read_json(&index_path)?;
    check_version(index.format_version, &index_path)?;
    let mut members = Vec::with_capacity(index.members.len());
    for entry in &index.members {
        if entry.dir.contains("..") || Path::new(&entry.dir).is_absolute() {
            return Err(bad(format!("member directory {} escapes the checkpoint", entry.dir)));
        }
        members.push(load_model(dir.join(&entry.dir))?);
    }
    Ensemble::new(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Architecture};

    fn ensemble(arch: Architecture) -> Ensemble {
        Ensemble::new(
            (0..2)
                .map(|s| build_model(&ModelSpec::new(arch.name(), [1, 8, 8], 4, s).unwrap()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let x = Tensor::new(vec![3, 1, 8, 8], (0..192).map(|i| (i % 13) as f32 / 12.0).collect()).unwrap();
        for arch in Architecture::ALL {
            let dir = tempfile::tempdir().unwrap();
            let e = ensemble(arch);
            save_checkpoint(&e, dir.path()).unwrap();
            let back = load_checkpoint(dir.path()).unwrap();
            assert_eq!(back, e);
            assert_eq!(back.predict(&x).unwrap(), e.predict(&x).unwrap());
        }
    }

    #[test]
    fn layout_has_one_directory_per_member() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ensemble(Architecture::CnnSmall), dir.path()).unwrap();
        assert!(dir.path().join("ensemble.json").is_file());
        for i in 0..2 {
            assert!(dir.path().join(format!("member-{i}/manifest.json")).is_file());
            assert!(dir.path().join(format!("member-{i}/weights.bin")).is_file());
        }
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ensemble(Architecture::MlpSmall), dir.path()).unwrap();
        let w = dir.path().join("member-1/weights.bin");
        let mut bytes = fs::read(&w).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&w, bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ensemble(Architecture::MlpSmall), dir.path()).unwrap();
        let m = dir.path().join("member-0/manifest.json");
        let text = fs::read_to_string(&m).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&m, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&ModelSpec::new("mlp-small", [1, 4, 4], 3, 0).unwrap()).unwrap();
        save_model(&m, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let tensors = v["tensors"].as_array_mut().unwrap();
        let last = tensors.pop().unwrap();
        // keep the blob consistent so only the missing entry is at fault
        let cut = last["offset"].as_u64().unwrap() as usize;
        let blob = fs::read(dir.path().join("weights.bin")).unwrap()[..cut].to_vec();
        v["weights_sha256"] = hex::encode(Sha256::digest(&blob)).into();
        fs::write(dir.path().join("weights.bin"), blob).unwrap();
        fs::write(&path, v.to_string()).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }
}
