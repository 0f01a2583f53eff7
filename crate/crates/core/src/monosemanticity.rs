//! Activation-weighted monosemanticity score and its permutation baseline.

use ndarray::{Array1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sum_{i != j} w_i w_j cos(e_i, e_j) / sum_{i != j} w_i w_j` over rows with
/// positive activation and nonzero embedding norm.
///
/// Uses `sum_{i != j} w_i w_j cos_ij = ||sum_i w_i u_i||^2 - sum_i w_i^2` with
/// unit vectors `u_i`.
pub fn monosemanticity_score(
    z: ArrayView2<'_, f64>,
    embeddings: ArrayView2<'_, f64>,
    neuron: usize,
) -> Result<f64> {
    score_with_order(z, embeddings, neuron, None)
}

fn score_with_order(
    z: ArrayView2<'_, f64>,
    embeddings: ArrayView2<'_, f64>,
    neuron: usize,
    order: Option<&[usize]>,
) -> Result<f64> {
    if z.nrows() != embeddings.nrows() {
        return Err(Error::Misaligned(format!(
            "{} latent rows vs {} embedding rows",
            z.nrows(),
            embeddings.nrows()
        )));
    }
    if neuron >= z.ncols() {
        return Err(Error::IndexOutOfRange {
            index: neuron,
            len: z.ncols(),
        });
    }
    let mut acc = Array1::<f64>::zeros(embeddings.ncols());
    let (mut sum_w, mut sum_w2, mut used) = (0.0, 0.0, 0usize);
    for (i, &w) in z.column(neuron).iter().enumerate() {
        if !(w > 0.0) {
            continue;
        }
        let e = embeddings.row(order.map_or(i, |o| o[i]));
        let norm = e.dot(&e).sqrt();
        if norm == 0.0 {
            continue;
        }
        acc.scaled_add(w / norm, &e);
        sum_w += w;
        sum_w2 += w * w;
        used += 1;
    }
    if used < 2 {
        return Err(Error::InvalidConfig(format!(
            "neuron {neuron} has {used} activating samples; need at least 2"
        )));
    }
    let denom = sum_w * sum_w - sum_w2;
    if !(denom > 0.0) {
        return Err(Error::Numerical(format!("neuron {neuron}: zero pair weight")));
    }
    let ms = (acc.dot(&acc) - sum_w2) / denom;
    Ok(ms.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsResult {
    pub neurons: Vec<usize>,
    pub per_concept_ms: Vec<f64>,
    pub baseline_ms: Vec<f64>,
    pub permutation_seed: Option<u64>,
}

impl MsResult {
    pub fn mean_ms(&self) -> Option<f64> {
        mean(&self.per_concept_ms)
    }

    pub fn mean_baseline(&self) -> Option<f64> {
        mean(&self.baseline_ms)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seeded row permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Scores each neuron on the original embeddings and on embeddings reordered
/// by `permutation` (row i takes embedding `permutation[i]`).
pub fn permutation_baseline_with(
    z: ArrayView2<'_, f64>,
    embeddings: ArrayView2<'_, f64>,
    neurons: &[usize],
    permutation: &[usize],
) -> Result<MsResult> {
    if permutation.len() != embeddings.nrows() {
        return Err(Error::DimensionMismatch {
            what: "permutation",
            expected: embeddings.nrows(),
            actual: permutation.len(),
        });
    }
    let pairs: Vec<(f64, f64)> = neurons
        .par_iter()
        .map(|&k| {
            Ok((
                score_with_order(z, embeddings, k, None)?,
                score_with_order(z, embeddings, k, Some(permutation))?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(MsResult {
        neurons: neurons.to_vec(),
        per_concept_ms: pairs.iter().map(|p| p.0).collect(),
        baseline_ms: pairs.iter().map(|p| p.1).collect(),
        permutation_seed: None,
    })
}

pub fn permutation_baseline(
    z: ArrayView2<'_, f64>,
    embeddings: ArrayView2<'_, f64>,
    neurons: &[usize],
    seed: u64,
) -> Result<MsResult> {
    let perm = seeded_permutation(embeddings.nrows(), seed);
    let mut out = permutation_baseline_with(z, embeddings, neurons, &perm)?;
    out.permutation_seed = Some(seed);
    Ok(out)
}

/// Neurons with at least two positively activating rows.
pub fn scorable_neurons(z: ArrayView2<'_, f64>, candidates: &[usize]) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&k| k < z.ncols() && z.column(k).iter().filter(|&&v| v > 0.0).count() >= 2)
        .collect()
}
