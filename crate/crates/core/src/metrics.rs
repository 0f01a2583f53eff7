//! Deletion, recovery and the five-way concept taxonomy.

use std::collections::BTreeSet;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::concept_space::ActiveConceptSet;
use crate::error::{Error, Result};
use crate::probe::{DecodabilityReport, ProbeScores};
use crate::sae::{LatentMatrix, Variant};

/// Anchor, raw-after and translated latents on the same test rows.
#[derive(Debug, Clone, Copy)]
pub struct ActivationTriple<'a> {
    pub z_t: &'a LatentMatrix,
    pub z_ts: &'a LatentMatrix,
    pub z_tt: &'a LatentMatrix,
}

impl<'a> ActivationTriple<'a> {
    pub fn new(z_t: &'a LatentMatrix, z_ts: &'a LatentMatrix, z_tt: &'a LatentMatrix) -> Result<Self> {
        let shape = z_t.data.dim();
        for z in [z_ts, z_tt] {
            if z.data.dim() != shape {
                return Err(Error::Misaligned(format!(
                    "latent shapes {:?} vs {:?}",
                    shape,
                    z.data.dim()
                )));
            }
        }
        let variants = (z_t.variant, z_ts.variant, z_tt.variant);
        if variants != (Variant::Anchor, Variant::RawAfter, Variant::Translated) {
            return Err(Error::Misaligned(format!(
                "unexpected variants {variants:?}"
            )));
        }
        Ok(Self { z_t, z_ts, z_tt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Retained,
    SeeminglyDeleted,
    Recovered,
    Decodable,
    Lost,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Retained => "retained",
            Category::SeeminglyDeleted => "seemingly_deleted",
            Category::Recovered => "recovered",
            Category::Decodable => "decodable",
            Category::Lost => "lost",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decodability {
    pub balanced_accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRecord {
    pub concept: usize,
    pub category: Category,
    pub decodability: Option<Decodability>,
    /// Set when the decodability probe could not be trained.
    pub skipped: Option<String>,
}

/// Per-concept probe outcome fed to [`classify_taxonomy`].
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeOutcome {
    Scored(Decodability),
    Skipped(String),
}

impl ProbeOutcome {
    pub fn from_scores(scores: &ProbeScores) -> Self {
        ProbeOutcome::Scored(Decodability {
            balanced_accuracy: scores.balanced_accuracy,
            f1: scores.f1.unwrap_or(0.0),
        })
    }
}

/// Looks up `concept` in a decodability report.
pub fn outcome_from_report(report: &DecodabilityReport, concept: usize) -> Option<ProbeOutcome> {
    let r = report.get(concept)?;
    match (&r.scores, &r.skipped) {
        (Some(s), _) => Some(ProbeOutcome::from_scores(s)),
        (None, Some(reason)) => Some(ProbeOutcome::Skipped(reason.clone())),
        (None, None) => None,
    }
}

fn set(a: &ActiveConceptSet) -> BTreeSet<usize> {
    a.indices.iter().copied().collect()
}

/// `|active_t \ active_ts| / |active_t|`, or `None` when `active_t` is empty.
pub fn deletion_ratio(active_t: &[usize], active_ts: &[usize]) -> Option<f64> {
    if active_t.is_empty() {
        return None;
    }
    let later: BTreeSet<usize> = active_ts.iter().copied().collect();
    let deleted = active_t.iter().filter(|k| !later.contains(k)).count();
    Some(deleted as f64 / active_t.len() as f64)
}

/// `|deleted ∩ active_T| / |deleted|`, or `None` when nothing was deleted.
pub fn regained_count_ratio(deleted: &[usize], active_tt: &[usize]) -> Option<f64> {
    if deleted.is_empty() {
        return None;
    }
    let after: BTreeSet<usize> = active_tt.iter().copied().collect();
    let back = deleted.iter().filter(|k| after.contains(k)).count();
    Some(back as f64 / deleted.len() as f64)
}

/// Recovered activation, clipped at the loss incurred, over the total loss
/// on the deleted concepts. `None` when no activation was lost.
pub fn regained_activation_mass(triple: &ActivationTriple<'_>, deleted: &[usize]) -> Result<Option<f64>> {
    let dim = triple.z_t.latent_dim();
    let (mut lost, mut regained) = (0.0, 0.0);
    for &k in deleted {
        if k >= dim {
            return Err(Error::IndexOutOfRange { index: k, len: dim });
        }
        Zip::from(triple.z_t.data.column(k))
            .and(triple.z_ts.data.column(k))
            .and(triple.z_tt.data.column(k))
            .for_each(|&t, &ts, &tt| {
                let loss = (t - ts).max(0.0);
                lost += loss;
                regained += (tt - ts).max(0.0).min(loss);
            });
    }
    Ok((lost > 0.0).then(|| regained / lost))
}

/// Assigns every anchor-active concept to one outcome. Concepts that are
/// seemingly deleted and not recovered need an entry in `outcomes`; a skipped
/// probe counts as lost.
pub fn classify_taxonomy<F>(
    active_t: &ActiveConceptSet,
    active_ts: &ActiveConceptSet,
    active_tt: &ActiveConceptSet,
    mut outcomes: F,
) -> Result<Vec<TaxonomyRecord>>
where
    F: FnMut(usize) -> Option<ProbeOutcome>,
{
    let (ts, tt) = (set(active_ts), set(active_tt));
    let mut out = Vec::with_capacity(active_t.len());
    for &k in &active_t.indices {
        let record = if ts.contains(&k) {
            TaxonomyRecord {
                concept: k,
                category: Category::Retained,
                decodability: None,
                skipped: None,
            }
        } else if tt.contains(&k) {
            TaxonomyRecord {
                concept: k,
                category: Category::Recovered,
                decodability: outcomes(k).and_then(|o| match o {
                    ProbeOutcome::Scored(d) => Some(d),
                    ProbeOutcome::Skipped(_) => None,
                }),
                skipped: None,
            }
        } else {
            match outcomes(k).ok_or(Error::MissingScore(k))? {
                ProbeOutcome::Scored(d) => TaxonomyRecord {
                    concept: k,
                    category: if d.f1 > 0.0 {
                        Category::Decodable
                    } else {
                        Category::Lost
                    },
                    decodability: Some(d),
                    skipped: None,
                },
                ProbeOutcome::Skipped(reason) => TaxonomyRecord {
                    concept: k,
                    category: Category::Lost,
                    decodability: None,
                    skipped: Some(reason),
                },
            }
        };
        out.push(record);
    }
    Ok(out)
}

/// `acc_at_t - acc_after`; both must be fractions or both percentages.
pub fn forgetting_delta(acc_at_t: f64, acc_after: f64) -> Result<f64> {
    let fraction = |v: f64| v <= 1.0;
    if fraction(acc_at_t) != fraction(acc_after) {
        return Err(Error::UnitMismatch(acc_at_t, acc_after));
    }
    Ok(acc_at_t - acc_after)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub retained: usize,
    pub seemingly_deleted: usize,
    pub recovered: usize,
    pub decodable: usize,
    pub lost: usize,
}

impl CategoryCounts {
    pub fn of(taxonomy: &[TaxonomyRecord]) -> Self {
        let mut c = Self::default();
        for r in taxonomy {
            match r.category {
                Category::Retained => c.retained += 1,
                Category::Recovered => c.recovered += 1,
                Category::Decodable => c.decodable += 1,
                Category::Lost => c.lost += 1,
                Category::SeeminglyDeleted => {}
            }
        }
        c.seemingly_deleted = c.recovered + c.decodable + c.lost;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub active_count_t: usize,
    pub active_count_ts: usize,
    pub active_count_tt: usize,
    pub deletion_ratio: Option<f64>,
    pub retained_ratio: Option<f64>,
    pub regained_count_ratio: Option<f64>,
    pub regained_activation_mass: Option<f64>,
    pub deleted: Vec<usize>,
    pub counts: CategoryCounts,
    pub taxonomy: Vec<TaxonomyRecord>,
}

/// Concepts active at t but not at t+s, ascending.
pub fn deleted_concepts(active_t: &ActiveConceptSet, active_ts: &ActiveConceptSet) -> Vec<usize> {
    active_t
        .indices
        .iter()
        .copied()
        .filter(|&k| !active_ts.contains(k))
        .collect()
}

/// Builds the full bundle for one task pair. All three sets must share the
/// anchor statistics.
pub fn metrics_bundle<F>(
    active_t: &ActiveConceptSet,
    active_ts: &ActiveConceptSet,
    active_tt: &ActiveConceptSet,
    triple: &ActivationTriple<'_>,
    outcomes: F,
) -> Result<MetricsBundle>
where
    F: FnMut(usize) -> Option<ProbeOutcome>,
{
    let fp = active_t.anchor_fingerprint;
    if active_ts.anchor_fingerprint != fp || active_tt.anchor_fingerprint != fp {
        return Err(Error::Misaligned(
            "active sets were built from different anchor statistics".into(),
        ));
    }
    let deleted = deleted_concepts(active_t, active_ts);
    let deletion = deletion_ratio(&active_t.indices, &active_ts.indices);
    let taxonomy = classify_taxonomy(active_t, active_ts, active_tt, outcomes)?;
    Ok(MetricsBundle {
        active_count_t: active_t.len(),
        active_count_ts: active_ts.len(),
        active_count_tt: active_tt.len(),
        deletion_ratio: deletion,
        retained_ratio: deletion.map(|d| 1.0 - d),
        regained_count_ratio: regained_count_ratio(&deleted, &active_tt.indices),
        regained_activation_mass: regained_activation_mass(triple, &deleted)?,
        counts: CategoryCounts::of(&taxonomy),
        deleted,
        taxonomy,
    })
}
