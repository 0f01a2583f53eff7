//! Model checkpoints: a JSON manifest plus one binary32 blob per parameter.
//!
//! Parameters are kept on the binary32 grid in memory after training, so a
//! save/load cycle reproduces them bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest<M> {
    schema_version: u32,
    kind: String,
    meta: M,
    params: Vec<ParamBlob>,
}

pub fn write_checkpoint<M: Serialize>(
    dir: &Path,
    manifest_name: &str,
    kind: &str,
    meta: &M,
    params: &[(&str, ArrayViewD<'_, f64>)],
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, array) in params {
        if array.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        let file = format!("{name}.f32");
        let standard = array.as_standard_layout();
        blob::write_f64_as_f32(&dir.join(&file), standard.iter().copied())?;
        entries.push(ParamBlob {
            name: (*name).to_owned(),
            shape: array.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: kind.to_owned(),
        meta,
        params: entries,
    };
    let path = dir.join(manifest_name);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::schema(&path, e.to_string()))?;
    blob::write_file(&path, text.as_bytes())?;
    Ok(path)
}

pub fn read_checkpoint<M: DeserializeOwned>(
    path: &Path,
    expected_kind: &str,
) -> Result<(M, BTreeMap<String, ArrayD<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest<M> =
        serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::schema(
            path,
            format!("unknown schema_version {}", manifest.schema_version),
        ));
    }
    if manifest.kind != expected_kind {
        return Err(Error::schema(
            path,
            format!("expected a {expected_kind} checkpoint, found {}", manifest.kind),
        ));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut params = BTreeMap::new();
    for entry in manifest.params {
        let len: usize = entry.shape.iter().product();
        let values = blob::read_f32_as_f64(&dir.join(&entry.file), len)?;
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .expect("length checked by reader");
        params.insert(entry.name, array);
    }
    Ok((manifest.meta, params))
}

/// Removes a named parameter and converts it to the requested dimensionality.
pub fn take_param<D: ndarray::Dimension>(
    params: &mut BTreeMap<String, ArrayD<f64>>,
    name: &str,
    path: &Path,
) -> Result<ndarray::Array<f64, D>> {
    let array = params
        .remove(name)
        .ok_or_else(|| Error::schema(path, format!("missing parameter {name}")))?;
    array
        .into_dimensionality::<D>()
        .map_err(|e| Error::schema(path, format!("parameter {name}: {e}")))
}
