//! Concept proxies: mean-threshold binarization of SAE latents, frequency-based
//! active sets, the inactive-latent ablation, and top-activating retrieval.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureMatrix;
use crate::sae::{EncodeMode, LatentMatrix, SaeModel, Variant};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_TOP_M: usize = 9;

/// Per-latent mean activation over the anchor train split of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorStats {
    pub mu: Array1<f64>,
    pub task_id: u32,
    /// Hash of the bit patterns of `mu`; carried into every active set built
    /// from these stats.
    pub fingerprint: u64,
}

impl AnchorStats {
    pub fn from_mu(mu: Array1<f64>, task_id: u32) -> Self {
        let fingerprint = fingerprint(mu.iter().copied());
        Self {
            mu,
            task_id,
            fingerprint,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }
}

// FNV-1a over the little-endian bytes of each value.
fn fingerprint(values: impl Iterator<Item = f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Binary activation pattern `a_k(x) = [z_k(x) > mu_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryActivations {
    pub bits: Array2<bool>,
    pub variant: Variant,
    pub anchor_fingerprint: u64,
}

impl BinaryActivations {
    /// Fraction of rows where each latent is on.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.bits.nrows();
        if n == 0 {
            return vec![0.0; self.bits.ncols()];
        }
        self.bits
            .columns()
            .into_iter()
            .map(|c| c.iter().filter(|&&b| b).count() as f64 / n as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveConceptSet {
    /// Sorted ascending.
    pub indices: Vec<usize>,
    pub tau: f64,
    pub variant: Variant,
    pub frequencies: Vec<f64>,
    pub anchor_fingerprint: u64,
}

impl ActiveConceptSet {
    pub fn contains(&self, k: usize) -> bool {
        self.indices.binary_search(&k).is_ok()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn compute_anchor_stats(z_train: &LatentMatrix) -> Result<AnchorStats> {
    if z_train.variant != Variant::Anchor {
        return Err(Error::InvalidConfig(format!(
            "anchor statistics need anchor latents, got {}",
            z_train.variant.as_str()
        )));
    }
    if z_train.n_samples() == 0 || z_train.latent_dim() == 0 {
        return Err(Error::Empty("anchor latent matrix".into()));
    }
    let mu = z_train
        .data
        .mean_axis(Axis(0))
        .expect("non-empty checked above");
    Ok(AnchorStats::from_mu(mu, z_train.source_task))
}

pub fn binarize(z: &LatentMatrix, stats: &AnchorStats) -> Result<BinaryActivations> {
    if z.latent_dim() != stats.latent_dim() {
        return Err(Error::DimensionMismatch {
            what: "latents vs anchor mean",
            expected: stats.latent_dim(),
            actual: z.latent_dim(),
        });
    }
    let mut bits = Array2::from_elem(z.data.dim(), false);
    Zip::from(bits.rows_mut())
        .and(z.data.rows())
        .for_each(|mut out, row| {
            Zip::from(&mut out)
                .and(&row)
                .and(&stats.mu)
                .for_each(|b, &v, &m| *b = v > m);
        });
    Ok(BinaryActivations {
        bits,
        variant: z.variant,
        anchor_fingerprint: stats.fingerprint,
    })
}

/// Latents whose on-frequency is at least `tau`.
pub fn active_concepts(binary: &BinaryActivations, tau: f64) -> Result<ActiveConceptSet> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau {tau} outside [0, 1]")));
    }
    let frequencies = binary.frequencies();
    let indices = frequencies
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= tau)
        .map(|(k, _)| k)
        .collect();
    Ok(ActiveConceptSet {
        indices,
        tau,
        variant: binary.variant,
        frequencies,
        anchor_fingerprint: binary.anchor_fingerprint,
    })
}

/// `h + decode(z_masked) - decode(z)`, with `z_masked` keeping only the active
/// latents of the inference-mode code `z`.
pub fn ablate_array(
    h: ArrayView2<'_, f64>,
    model: &SaeModel,
    active: &ActiveConceptSet,
) -> Result<Array2<f64>> {
    let z = model.encode_array(h, EncodeMode::Inference)?;
    let mut keep = vec![false; model.latent_dim()];
    for &k in &active.indices {
        if k >= keep.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: keep.len(),
            });
        }
        keep[k] = true;
    }
    let mut masked = z.clone();
    for (k, mut col) in masked.columns_mut().into_iter().enumerate() {
        if !keep[k] {
            col.fill(0.0);
        }
    }
    let full = model.decode_array(z.view())?;
    let reduced = model.decode_array(masked.view())?;
    Ok(&h + &(reduced - full))
}

pub fn ablate_inactive(
    h: &FeatureMatrix,
    model: &SaeModel,
    active: &ActiveConceptSet,
) -> Result<FeatureMatrix> {
    let out = ablate_array(h.to_f64().view(), model, active)?;
    FeatureMatrix::from_f64(&out, h.labels().map(<[u32]>::to_vec), h.label_count(), h.key())
}

/// Rows with the `m` largest activations of `neuron`, descending; ties go to
/// the lower row index.
pub fn top_activating(z: &LatentMatrix, neuron: usize, m: usize) -> Result<Vec<usize>> {
    if neuron >= z.latent_dim() {
        return Err(Error::IndexOutOfRange {
            index: neuron,
            len: z.latent_dim(),
        });
    }
    if m > z.n_samples() {
        return Err(Error::InvalidConfig(format!(
            "asked for {m} samples from {}",
            z.n_samples()
        )));
    }
    let col = z.data.column(neuron);
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    idx.truncate(m);
    Ok(idx)
}
