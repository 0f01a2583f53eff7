//! On-disk feature dumps.
//!
//! A dump is a directory holding `manifest.json`, a row-major little-endian
//! binary32 blob (`features.f32`) and optionally a little-endian u32 label
//! vector (`labels.u32`). The canonical layout under a features root is
//! `<root>/task<t>/ckpt<s>/<split>/`.
//!
//! Row `i` of every dump of the same task and split refers to the same input
//! sample, whatever checkpoint produced it. [`align_pair`] enforces that before
//! any two dumps are compared.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};

pub const FEATURE_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "features.f32";
pub const LABELS_FILE: &str = "labels.u32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub schema_version: u32,
    pub task_id: u32,
    /// Number of tasks trained after `task_id` (0 = the task's own checkpoint).
    pub checkpoint_id: u32,
    pub split: Split,
    pub n_samples: usize,
    pub dim: usize,
    pub label_count: u32,
    pub blob_file: String,
    #[serde(default)]
    pub labels_file: Option<String>,
    #[serde(default)]
    pub seed_note: String,
}

/// Backbone activations for one (task, checkpoint, split) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f32>,
    labels: Option<Vec<u32>>,
    manifest: FeatureManifest,
}

/// Where a matrix sits in the continual-training timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureKey {
    pub task_id: u32,
    pub checkpoint_id: u32,
    pub split: Split,
}

impl FeatureMatrix {
    /// Builds a matrix, validating finiteness and label range.
    pub fn new(
        data: Array2<f32>,
        labels: Option<Vec<u32>>,
        label_count: u32,
        key: FeatureKey,
    ) -> Result<Self> {
        let (n_samples, dim) = data.dim();
        if n_samples == 0 || dim == 0 {
            return Err(Error::Empty(format!("feature matrix {n_samples}x{dim}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "features of task {} ckpt {} ({})",
                key.task_id, key.checkpoint_id, key.split
            )));
        }
        if let Some(labels) = &labels {
            check_labels(labels, n_samples, label_count, Path::new("<memory>"))?;
        }
        let manifest = FeatureManifest {
            schema_version: FEATURE_SCHEMA_VERSION,
            task_id: key.task_id,
            checkpoint_id: key.checkpoint_id,
            split: key.split,
            n_samples,
            dim,
            label_count,
            blob_file: BLOB_FILE.to_owned(),
            labels_file: labels.as_ref().map(|_| LABELS_FILE.to_owned()),
            seed_note: String::new(),
        };
        Ok(Self {
            data,
            labels,
            manifest,
        })
    }

    /// Same as [`FeatureMatrix::new`] but from f64 values, rounded to binary32.
    pub fn from_f64(
        data: &Array2<f64>,
        labels: Option<Vec<u32>>,
        label_count: u32,
        key: FeatureKey,
    ) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32), labels, label_count, key)
    }

    pub fn with_seed_note(mut self, note: impl Into<String>) -> Self {
        self.manifest.seed_note = note.into();
        self
    }

    /// Copy with a different timeline position, keeping data and labels.
    pub fn relabeled(&self, key: FeatureKey) -> Self {
        let mut out = self.clone();
        out.manifest.task_id = key.task_id;
        out.manifest.checkpoint_id = key.checkpoint_id;
        out.manifest.split = key.split;
        out
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    /// Widened copy of the data for numerical work.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels.as_deref().ok_or_else(|| {
            Error::MissingLabels(format!(
                "task {} ckpt {} ({})",
                self.manifest.task_id, self.manifest.checkpoint_id, self.manifest.split
            ))
        })
    }

    pub fn manifest(&self) -> &FeatureManifest {
        &self.manifest
    }

    pub fn key(&self) -> FeatureKey {
        FeatureKey {
            task_id: self.manifest.task_id,
            checkpoint_id: self.manifest.checkpoint_id,
            split: self.manifest.split,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn label_count(&self) -> u32 {
        self.manifest.label_count
    }
}

fn check_labels(labels: &[u32], n_samples: usize, label_count: u32, path: &Path) -> Result<()> {
    if labels.len() != n_samples {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: n_samples as u64 * 4,
            actual: labels.len() as u64 * 4,
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= label_count) {
        return Err(Error::LabelOutOfRange {
            path: path.to_path_buf(),
            row,
            label,
            label_count,
        });
    }
    Ok(())
}

/// `<root>/task<t>/ckpt<s>/<split>`
pub fn layout_dir(root: &Path, key: FeatureKey) -> PathBuf {
    root.join(format!("task{}", key.task_id))
        .join(format!("ckpt{}", key.checkpoint_id))
        .join(key.split.to_string())
}

pub fn layout_manifest(root: &Path, key: FeatureKey) -> PathBuf {
    layout_dir(root, key).join(MANIFEST_FILE)
}

/// Writes the matrix into `dir` and returns the manifest path.
pub fn save_features(matrix: &FeatureMatrix, dir: &Path) -> Result<PathBuf> {
    if matrix.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features to save".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = &matrix.manifest;

    let row_major = matrix.data.as_standard_layout();
    blob::write_file(
        &dir.join(&manifest.blob_file),
        &blob::encode_f32(row_major.iter().copied()),
    )?;
    if let (Some(labels), Some(file)) = (&matrix.labels, &manifest.labels_file) {
        blob::write_file(&dir.join(file), &blob::encode_u32(labels))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    blob::write_file(&path, text.as_bytes())?;
    Ok(path)
}

/// Saves into the canonical layout under `root`.
pub fn save_to_layout(matrix: &FeatureMatrix, root: &Path) -> Result<PathBuf> {
    save_features(matrix, &layout_dir(root, matrix.key()))
}

pub fn load_features(manifest_path: &Path) -> Result<FeatureMatrix> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: FeatureManifest = serde_json::from_str(&text)
        .map_err(|e| Error::schema(manifest_path, e.to_string()))?;
    if manifest.schema_version != FEATURE_SCHEMA_VERSION {
        return Err(Error::schema(
            manifest_path,
            format!("unknown schema_version {}", manifest.schema_version),
        ));
    }
    if manifest.n_samples == 0 || manifest.dim == 0 {
        return Err(Error::schema(manifest_path, "n_samples and dim must be positive"));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let blob_path = dir.join(&manifest.blob_file);
    let expected = manifest.n_samples as u64 * manifest.dim as u64 * 4;
    let bytes = blob::read_exact_len(&blob_path, expected)?;
    let values = blob::decode_f32(&bytes);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(blob_path.display().to_string()));
    }
    let data = Array2::from_shape_vec((manifest.n_samples, manifest.dim), values)
        .expect("length checked above");

    let labels = match &manifest.labels_file {
        Some(file) => {
            let path = dir.join(file);
            let bytes = blob::read_exact_len(&path, manifest.n_samples as u64 * 4)?;
            let labels = blob::decode_u32(&bytes);
            check_labels(&labels, manifest.n_samples, manifest.label_count, &path)?;
            Some(labels)
        }
        None => None,
    };

    Ok(FeatureMatrix {
        data,
        labels,
        manifest,
    })
}

pub fn load_from_layout(root: &Path, key: FeatureKey) -> Result<FeatureMatrix> {
    load_features(&layout_manifest(root, key))
}

/// Two matrices whose rows describe the same samples.
///
/// `source` is typically the later checkpoint and `target` the anchor, matching
/// the direction of the recovery map.
#[derive(Debug, Clone, Copy)]
pub struct PairedView<'a> {
    pub source: &'a FeatureMatrix,
    pub target: &'a FeatureMatrix,
}

impl PairedView<'_> {
    pub fn n_samples(&self) -> usize {
        self.source.n_samples()
    }
}

pub fn align_pair<'a>(source: &'a FeatureMatrix, target: &'a FeatureMatrix) -> Result<PairedView<'a>> {
    let (a, b) = (&source.manifest, &target.manifest);
    if a.task_id != b.task_id {
        return Err(Error::Misaligned(format!(
            "task_id {} vs {}",
            a.task_id, b.task_id
        )));
    }
    if a.split != b.split {
        return Err(Error::Misaligned(format!("split {} vs {}", a.split, b.split)));
    }
    if a.n_samples != b.n_samples {
        return Err(Error::Misaligned(format!(
            "n_samples {} vs {}",
            a.n_samples, b.n_samples
        )));
    }
    if source.labels != target.labels {
        return Err(Error::Misaligned("label vectors differ".into()));
    }
    Ok(PairedView { source, target })
}
