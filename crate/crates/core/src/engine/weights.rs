//! Weight files: safetensors tensors with string metadata, plus a JSON shape
//! manifest stored next to pretrained weights.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{EngineError, Normalization};

pub type TensorMap = BTreeMap<String, ArrayD<f32>>;

pub fn write_tensors(
    path: &Path,
    tensors: &TensorMap,
    metadata: BTreeMap<String, String>,
) -> Result<(), EngineError> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let data: Vec<u8> = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), t.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| EngineError::Weights(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let meta: HashMap<String, String> = metadata.into_iter().collect();
    let buffer = safetensors::serialize(views, &Some(meta))
        .map_err(|e| EngineError::Weights(e.to_string()))?;
    std::fs::write(path, buffer).map_err(|source| EngineError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tensors(path: &Path) -> Result<(TensorMap, BTreeMap<String, String>), EngineError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EngineError::NotFound(path.to_path_buf()),
        _ => EngineError::Io(e),
    })?;
    let corrupt =
        |e: safetensors::SafeTensorError| EngineError::Weights(format!("{}: {e}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(corrupt)?;
    let metadata: BTreeMap<String, String> = meta
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let st = SafeTensors::deserialize(&bytes).map_err(corrupt)?;
    let mut tensors = TensorMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(EngineError::Weights(format!(
                "{name}: expected f32, found {:?}",
                view.dtype()
            )));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data)
            .map_err(|e| EngineError::Weights(format!("{name}: {e}")))?;
        tensors.insert(name, arr);
    }
    Ok((tensors, metadata))
}

/// Declares what a pretrained weight file contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub backbone_id: String,
    pub normalization: Normalization,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

impl WeightsManifest {
    pub fn path_for(weights: &Path) -> PathBuf {
        weights.with_extension("json")
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => EngineError::NotFound(path.to_path_buf()),
            _ => EngineError::Io(e),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| EngineError::Weights(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )
        .map_err(|source| EngineError::Write {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Writes `tensors` to `path` and the matching manifest beside it.
pub fn save_pretrained(
    path: &Path,
    backbone_id: &str,
    normalization: Normalization,
    tensors: &TensorMap,
) -> Result<WeightsManifest, EngineError> {
    let manifest = WeightsManifest {
        backbone_id: backbone_id.to_string(),
        normalization,
        tensors: tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect(),
    };
    write_tensors(
        path,
        tensors,
        BTreeMap::from([("backbone_id".to_string(), backbone_id.to_string())]),
    )?;
    manifest.save(&WeightsManifest::path_for(path))?;
    Ok(manifest)
}
