//! On-disk model snapshots: a JSON manifest plus one binary tensor file
//! per named parameter or buffer.
//!
//! Loading then saving a checkpoint reproduces it byte for byte: the
//! manifest is a fixed-order struct serialized with exact float
//! round-tripping, and tensor files are raw little-endian payloads.

use crate::layers::Visit;
use crate::models::{build_model, LossWeights, Model, ModelConfig, ModelKind};
use crate::tensor::serialize::{decode, encode, CodecError};
use crate::tensor::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("tensor `{name}`: {source}")]
    Codec { name: String, source: CodecError },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint holds unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint precision is {file}, requested {requested}")]
    PrecisionMismatch { file: String, requested: String },
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Training-time settings echoed into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub other_lr: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub horizon_minutes: u32,
    pub exposures: crate::datapipe::ExposureSelection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub model: ModelKind,
    pub model_config: ModelConfig,
    pub precision: String,
    /// Normalization factor fitted on the training split. Required:
    /// evaluation refuses to renormalize silently.
    pub alpha: f64,
    /// Epoch whose weights this checkpoint holds (best validation MAE).
    pub epoch: usize,
    pub validation_mae_w: f64,
    pub train: TrainSettings,
    pub tensor_dir: String,
}

fn precision_name<T: Element>() -> &'static str {
    match T::DTYPE {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Collects every named parameter and buffer of the model.
pub fn named_tensors<T: Element>(model: &mut Model<T>) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    model.visit_params("model", &mut |name, p| {
        out.insert(name.to_string(), p.value.clone());
    });
    model.visit_buffers("model", &mut |name, t| {
        out.insert(name.to_string(), t.clone());
    });
    out
}

/// Writes `manifest.json` and one tensor file per named tensor.
pub fn save<T: Element>(dir: &Path, manifest: &Manifest, model: &mut Model<T>) -> Result<()> {
    let tensors = named_tensors(model);
    let tdir = dir.join(&manifest.tensor_dir);
    std::fs::create_dir_all(&tdir).map_err(|e| io_err(&tdir, e))?;
    for (name, tensor) in &tensors {
        let path = tdir.join(format!("{name}.bin"));
        std::fs::write(&path, encode(tensor)).map_err(|e| io_err(&path, e))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    std::fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))
}

/// Rebuilds the model from the manifest and fills every parameter and
/// buffer from the tensor directory. Every model tensor must appear
/// exactly once; stray files are rejected.
pub fn load<T: Element>(dir: &Path) -> Result<(Manifest, Model<T>)> {
    let manifest = read_manifest(dir)?;
    let requested = precision_name::<T>();
    if manifest.precision != requested {
        return Err(CheckpointError::PrecisionMismatch {
            file: manifest.precision.clone(),
            requested: requested.into(),
        });
    }
    let mut model = build_model::<T>(manifest.model_config.clone())?;

    let tdir = dir.join(&manifest.tensor_dir);
    let mut available: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(&tdir).map_err(|e| io_err(&tdir, e))? {
        let entry = entry.map_err(|e| io_err(&tdir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".bin") {
            available.insert(stem.to_string(), entry.path());
        } else {
            return Err(CheckpointError::UnexpectedTensor(name));
        }
    }

    let mut fill = |name: &str, target: &mut Tensor<T>| -> Result<()> {
        let path = available
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        let tensor = decode::<T>(&bytes).map_err(|source| CheckpointError::Codec {
            name: name.to_string(),
            source,
        })?;
        if tensor.shape() != target.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: target.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        *target = tensor;
        Ok(())
    };

    let mut first_err: Option<CheckpointError> = None;
    model.visit_params("model", &mut |name, p| {
        if first_err.is_none() {
            if let Err(e) = fill(name, &mut p.value) {
                first_err = Some(e);
            }
        }
    });
    model.visit_buffers("model", &mut |name, t| {
        if first_err.is_none() {
            if let Err(e) = fill(name, t) {
                first_err = Some(e);
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    if let Some((stray, _)) = available.into_iter().next() {
        return Err(CheckpointError::UnexpectedTensor(stray));
    }
    Ok((manifest, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest(config: ModelConfig) -> Manifest {
        Manifest {
            schema_version: 1,
            model: config.kind,
            model_config: config,
            precision: "f32".into(),
            alpha: 0.1278,
            epoch: 3,
            validation_mae_w: 42.5,
            train: TrainSettings {
                epochs: 5,
                batch_size: 16,
                encoder_lr: 1e-3,
                other_lr: 3e-4,
                loss_weights: LossWeights::default(),
                seed: 9,
                horizon_minutes: 1,
                exposures: crate::datapipe::ExposureSelection::All,
            },
            tensor_dir: TENSOR_DIR.into(),
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Lstm,
            history_len: 2,
            resolution: 16,
            input_channels: 2,
            seed: 5,
            power_hidden: 4,
            power_latent: 4,
            predictor_width: 8,
            lstm_hidden: 6,
            fire_channels: vec![],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let mut model = build_model::<f32>(tiny_config()).unwrap();
        let manifest = tiny_manifest(tiny_config());
        save(&a, &manifest, &mut model).unwrap();

        let (loaded_manifest, mut loaded) = load::<f32>(&a).unwrap();
        save(&b, &loaded_manifest, &mut loaded).unwrap();

        let walk = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files = vec![(
                MANIFEST_FILE.to_string(),
                std::fs::read(root.join(MANIFEST_FILE)).unwrap(),
            )];
            let mut names: Vec<_> = std::fs::read_dir(root.join(TENSOR_DIR))
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            for n in names {
                files.push((
                    n.clone(),
                    std::fs::read(root.join(TENSOR_DIR).join(&n)).unwrap(),
                ));
            }
            files
        };
        assert_eq!(walk(&a), walk(&b));
    }

    #[test]
    fn loaded_model_reproduces_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model::<f32>(tiny_config()).unwrap();
        let before = named_tensors(&mut model);
        save(dir.path(), &tiny_manifest(tiny_config()), &mut model).unwrap();
        let (_, mut loaded) = load::<f32>(dir.path()).unwrap();
        assert_eq!(before, named_tensors(&mut loaded));
    }

    #[test]
    fn missing_tensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model::<f32>(tiny_config()).unwrap();
        save(dir.path(), &tiny_manifest(tiny_config()), &mut model).unwrap();
        let victim = dir
            .path()
            .join(TENSOR_DIR)
            .join("model.power_encoder.layer0.weight.bin");
        std::fs::remove_file(&victim).unwrap();
        assert!(matches!(
            load::<f32>(dir.path()),
            Err(CheckpointError::MissingTensor(_))
        ));
    }

    #[test]
    fn stray_tensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model::<f32>(tiny_config()).unwrap();
        save(dir.path(), &tiny_manifest(tiny_config()), &mut model).unwrap();
        std::fs::write(
            dir.path().join(TENSOR_DIR).join("zzz.extra.bin"),
            encode(&Tensor::<f32>::scalar(1.0)),
        )
        .unwrap();
        assert!(matches!(
            load::<f32>(dir.path()),
            Err(CheckpointError::UnexpectedTensor(_))
        ));
    }

    #[test]
    fn precision_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model::<f32>(tiny_config()).unwrap();
        save(dir.path(), &tiny_manifest(tiny_config()), &mut model).unwrap();
        assert!(matches!(
            load::<f64>(dir.path()),
            Err(CheckpointError::PrecisionMismatch { .. })
        ));
    }

    #[test]
    fn manifest_without_alpha_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model::<f32>(tiny_config()).unwrap();
        save(dir.path(), &tiny_manifest(tiny_config()), &mut model).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("alpha");
        std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }
}
