//! Synthetic multi-checkpoint feature data with planted sparse concepts.
//!
//! Anchor features are sparse nonnegative combinations of a random unit-norm
//! dictionary plus Gaussian noise. Later checkpoints apply a controlled drift
//! to the same samples, so every downstream metric has a known answer: an
//! identity drift deletes nothing, an invertible affine drift is exactly
//! undone by a linear map, and an erasure drift destroys the information
//! carried by specific atoms.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::feature_store::{self, FeatureKey, FeatureMatrix, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Identity,
    Rotation,
    RotationScaling,
    Affine,
    Erasure,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub kind: DriftKind,
    /// Per-axis scale factors are drawn uniformly from this range.
    #[serde(default = "default_scale_range")]
    pub scale_range: [f64; 2],
    #[serde(default)]
    pub erased_atoms: Vec<usize>,
    #[serde(default)]
    pub bias_norm: f64,
    /// Erasure only: rotate after projecting out the erased atoms.
    #[serde(default)]
    pub rotate_after_erasure: bool,
    /// Independent Gaussian noise added to the drifted features.
    #[serde(default)]
    pub after_noise_sigma: f64,
}

fn default_scale_range() -> [f64; 2] {
    [1.0, 1.0]
}

impl DriftSpec {
    pub fn new(kind: DriftKind) -> Self {
        Self {
            kind,
            scale_range: default_scale_range(),
            erased_atoms: Vec::new(),
            bias_norm: 0.0,
            rotate_after_erasure: false,
            after_noise_sigma: 0.0,
        }
    }

    pub fn erasure(atoms: Vec<usize>, rotate: bool) -> Self {
        Self {
            erased_atoms: atoms,
            rotate_after_erasure: rotate,
            ..Self::new(DriftKind::Erasure)
        }
    }

    pub fn affine(scale_range: [f64; 2], bias_norm: f64) -> Self {
        Self {
            scale_range,
            bias_norm,
            ..Self::new(DriftKind::Affine)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d: usize,
    pub n_atoms: usize,
    pub k_true: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub n_classes: usize,
    pub drift: DriftSpec,
    /// Drifted checkpoints 1..=n_checkpoints; checkpoint s applies the drift s times.
    #[serde(default = "one")]
    pub n_checkpoints: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SynthSpec {
    /// The reference configuration: d=16, 8 atoms, 3 active per sample,
    /// 2000 train / 1000 test samples, sigma 0.01, 4 classes.
    pub fn reference(drift: DriftSpec, seed: u64) -> Self {
        Self {
            d: 16,
            n_atoms: 8,
            k_true: 3,
            n_train: 2000,
            n_test: 1000,
            noise_sigma: 0.01,
            n_classes: 4,
            drift,
            n_checkpoints: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.n_atoms == 0 || self.n_train == 0 || self.n_test == 0 {
            return bad("d, n_atoms, n_train and n_test must be positive".into());
        }
        if self.k_true == 0 || self.k_true > self.n_atoms {
            return bad(format!("k_true {} must lie in [1, n_atoms]", self.k_true));
        }
        if self.n_classes == 0 || self.n_atoms % self.n_classes != 0 {
            return bad(format!(
                "n_classes {} must divide n_atoms {}",
                self.n_classes, self.n_atoms
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.drift.after_noise_sigma >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        let [lo, hi] = self.drift.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("scale_range [{lo}, {hi}] must be positive and ordered"));
        }
        if let Some(&a) = self.drift.erased_atoms.iter().find(|&&a| a >= self.n_atoms) {
            return bad(format!("erased atom {a} out of range"));
        }
        if self.drift.kind == DriftKind::Erasure && self.drift.erased_atoms.is_empty() {
            return bad("erasure drift needs at least one erased atom".into());
        }
        if self.n_checkpoints == 0 {
            return bad("n_checkpoints must be at least 1".into());
        }
        Ok(())
    }
}

/// The map applied to anchor features to produce a drifted checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftOperator {
    Identity,
    /// `h -> A h + b`
    Affine { a: Array2<f64>, b: Array1<f64> },
    /// `h -> R2 phi(R1 h)` with `phi(x) = x + 0.5 tanh(x)`, elementwise.
    Nonlinear { r1: Array2<f64>, r2: Array2<f64> },
}

impl DriftOperator {
    pub fn apply(&self, h: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            DriftOperator::Identity => h.to_owned(),
            DriftOperator::Affine { a, b } => {
                let mut out = h.dot(&a.t());
                out += b;
                out
            }
            DriftOperator::Nonlinear { r1, r2 } => {
                let mixed = h.dot(&r1.t()).mapv(|x| x + 0.5 * x.tanh());
                mixed.dot(&r2.t())
            }
        }
    }

    /// `(A, b)` for affine drifts (identity included).
    pub fn linear_part(&self, d: usize) -> Option<(Array2<f64>, Array1<f64>)> {
        match self {
            DriftOperator::Identity => Some((Array2::eye(d), Array1::zeros(d))),
            DriftOperator::Affine { a, b } => Some((a.clone(), b.clone())),
            DriftOperator::Nonlinear { .. } => None,
        }
    }
}

/// Haar-distributed orthogonal matrix.
pub fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    Array2::from_shape_fn((d, d), |(i, j)| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * sign
    })
}

/// Projector onto the orthogonal complement of the given columns' span.
pub fn complement_projector(columns: ArrayView2<'_, f64>) -> Array2<f64> {
    let (d, m) = columns.dim();
    let mat = DMatrix::<f64>::from_fn(d, m, |i, j| columns[[i, j]]);
    let q = mat.qr().q();
    let mut p = Array2::<f64>::eye(d);
    for c in 0..m.min(d) {
        for i in 0..d {
            for j in 0..d {
                p[[i, j]] -= q[(i, c)] * q[(j, c)];
            }
        }
    }
    p
}

fn build_operator(spec: &SynthSpec, dictionary: &Array2<f64>, rng: &mut ChaCha8Rng) -> DriftOperator {
    let d = spec.d;
    let drift = &spec.drift;
    let [lo, hi] = drift.scale_range;
    let scales = |rng: &mut ChaCha8Rng| -> Array2<f64> {
        let c: Vec<f64> = (0..d)
            .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        Array2::from_diag(&Array1::from(c))
    };
    match drift.kind {
        DriftKind::Identity => DriftOperator::Identity,
        DriftKind::Rotation => DriftOperator::Affine {
            a: random_rotation(d, rng),
            b: Array1::zeros(d),
        },
        DriftKind::RotationScaling | DriftKind::Affine => {
            let r = random_rotation(d, rng);
            let a = r.dot(&scales(rng));
            let b = if drift.kind == DriftKind::Affine && drift.bias_norm > 0.0 {
                let v: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
                let norm = v.dot(&v).sqrt();
                v * (drift.bias_norm / norm)
            } else {
                Array1::zeros(d)
            };
            DriftOperator::Affine { a, b }
        }
        DriftKind::Erasure => {
            let erased = dictionary.select(Axis(1), &drift.erased_atoms);
            let p = complement_projector(erased.view());
            let a = if drift.rotate_after_erasure {
                random_rotation(d, rng).dot(&p)
            } else {
                p
            };
            DriftOperator::Affine {
                a,
                b: Array1::zeros(d),
            }
        }
        DriftKind::Nonlinear => DriftOperator::Nonlinear {
            r1: random_rotation(d, rng),
            r2: random_rotation(d, rng),
        },
    }
}

/// Known generating factors of a synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// d x n_atoms, unit-norm columns.
    pub dictionary: Array2<f64>,
    pub codes_train: Array2<f64>,
    pub codes_test: Array2<f64>,
    pub erased: Vec<usize>,
    pub drift: DriftOperator,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub anchor_train: FeatureMatrix,
    pub anchor_test: FeatureMatrix,
    /// `(train, test)` for checkpoints 1..=n_checkpoints.
    pub drifted: Vec<(FeatureMatrix, FeatureMatrix)>,
    pub truth: GroundTruth,
    pub spec: SynthSpec,
}

fn stream(seed: u64, task_id: u32, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(task_id) << 32));
    rng.set_stream(purpose);
    rng
}

fn sample_codes(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<u32>) {
    let group = spec.n_atoms / spec.n_classes;
    let mut codes = Array2::zeros((n, spec.n_atoms));
    let mut labels = Vec::with_capacity(n);
    let mut atoms: Vec<usize> = (0..spec.n_atoms).collect();
    for mut row in codes.rows_mut() {
        let (chosen, _) = atoms.partial_shuffle(rng, spec.k_true);
        let mut dominant = (0usize, f64::NEG_INFINITY);
        for &a in chosen.iter() {
            let mag = rng.random_range(0.5..=1.5);
            row[a] = mag;
            if mag > dominant.1 {
                dominant = (a, mag);
            }
        }
        labels.push((dominant.0 / group) as u32);
    }
    (codes, labels)
}

fn add_noise(h: &mut Array2<f64>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        h.mapv_inplace(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + sigma * e
        });
    }
}

/// Generates one task; `task_id` decorrelates tasks sharing a spec seed.
pub fn generate_task(spec: &SynthSpec, task_id: u32) -> Result<SynthData> {
    spec.validate()?;
    let mut dict_rng = stream(spec.seed, task_id, 0);
    let mut code_rng = stream(spec.seed, task_id, 1);
    let mut noise_rng = stream(spec.seed, task_id, 2);
    let mut drift_rng = stream(spec.seed, task_id, 3);
    let mut after_rng = stream(spec.seed, task_id, 4);

    let mut dictionary: Array2<f64> =
        Array2::from_shape_simple_fn((spec.d, spec.n_atoms), || StandardNormal.sample(&mut dict_rng));
    for mut col in dictionary.columns_mut() {
        let norm = col.dot(&col).sqrt();
        col /= norm;
    }

    let (codes_train, labels_train) = sample_codes(spec, spec.n_train, &mut code_rng);
    let (codes_test, labels_test) = sample_codes(spec, spec.n_test, &mut code_rng);
    let mut h_train = codes_train.dot(&dictionary.t());
    let mut h_test = codes_test.dot(&dictionary.t());
    add_noise(&mut h_train, spec.noise_sigma, &mut noise_rng);
    add_noise(&mut h_test, spec.noise_sigma, &mut noise_rng);

    let operator = build_operator(spec, &dictionary, &mut drift_rng);
    let label_count = spec.n_classes as u32;
    let note = format!("synthetic seed {} task {task_id}", spec.seed);
    let make = |h: &Array2<f64>, labels: &[u32], ckpt: u32, split: Split| {
        FeatureMatrix::from_f64(
            h,
            Some(labels.to_vec()),
            label_count,
            FeatureKey {
                task_id,
                checkpoint_id: ckpt,
                split,
            },
        )
        .map(|m| m.with_seed_note(note.clone()))
    };

    let anchor_train = make(&h_train, &labels_train, 0, Split::Train)?;
    let anchor_test = make(&h_test, &labels_test, 0, Split::Test)?;
    // Drift the binary32 anchor values so identity drift is bitwise exact.
    let mut cur_train = anchor_train.to_f64();
    let mut cur_test = anchor_test.to_f64();
    let mut drifted = Vec::with_capacity(spec.n_checkpoints);
    for s in 1..=spec.n_checkpoints as u32 {
        cur_train = operator.apply(cur_train.view());
        cur_test = operator.apply(cur_test.view());
        add_noise(&mut cur_train, spec.drift.after_noise_sigma, &mut after_rng);
        add_noise(&mut cur_test, spec.drift.after_noise_sigma, &mut after_rng);
        drifted.push((
            make(&cur_train, &labels_train, s, Split::Train)?,
            make(&cur_test, &labels_test, s, Split::Test)?,
        ));
    }

    Ok(SynthData {
        anchor_train,
        anchor_test,
        drifted,
        truth: GroundTruth {
            dictionary,
            codes_train,
            codes_test,
            erased: spec.drift.erased_atoms.clone(),
            drift: operator,
        },
        spec: spec.clone(),
    })
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    generate_task(spec, 0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthMeta {
    spec: SynthSpec,
    erased: Vec<usize>,
    drift_is_affine: bool,
}

pub const TRUTH_MANIFEST: &str = "ground_truth.json";

/// Writes all matrices into the canonical layout and the ground truth to
/// `<root>/task<t>/ground_truth/`. Returns the ground-truth manifest path.
pub fn write_synth(data: &SynthData, root: &Path) -> Result<PathBuf> {
    feature_store::save_to_layout(&data.anchor_train, root)?;
    feature_store::save_to_layout(&data.anchor_test, root)?;
    for (train, test) in &data.drifted {
        feature_store::save_to_layout(train, root)?;
        feature_store::save_to_layout(test, root)?;
    }
    let task = data.anchor_train.manifest().task_id;
    let dir = root.join(format!("task{task}")).join("ground_truth");
    let d = data.spec.d;
    let linear = data.truth.drift.linear_part(d);
    let meta = TruthMeta {
        spec: data.spec.clone(),
        erased: data.truth.erased.clone(),
        drift_is_affine: linear.is_some(),
    };
    let mut params = vec![
        ("dictionary", data.truth.dictionary.view().into_dyn()),
        ("codes_train", data.truth.codes_train.view().into_dyn()),
        ("codes_test", data.truth.codes_test.view().into_dyn()),
    ];
    if let Some((a, b)) = &linear {
        params.push(("drift_linear", a.view().into_dyn()));
        params.push(("drift_offset", b.view().into_dyn()));
    }
    checkpoint::write_checkpoint(&dir, TRUTH_MANIFEST, "ground_truth", &meta, &params)
}

/// Best-matching atom for each SAE decoder column, when its cosine similarity
/// reaches `threshold`.
pub fn align_latents_to_atoms(
    w_dec: ArrayView2<'_, f64>,
    dictionary: ArrayView2<'_, f64>,
    threshold: f64,
) -> Vec<Option<usize>> {
    w_dec
        .columns()
        .into_iter()
        .map(|col| {
            let norm = col.dot(&col).sqrt();
            if norm == 0.0 {
                return None;
            }
            dictionary
                .columns()
                .into_iter()
                .enumerate()
                .map(|(j, atom)| (j, col.dot(&atom) / (norm * atom.dot(&atom).sqrt())))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .filter(|&(_, cos)| cos >= threshold)
                .map(|(j, _)| j)
        })
        .collect()
}

pub const ALIGNMENT_THRESHOLD: f64 = 0.7;

/// Metric bounds implied by a spec's construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedBounds {
    pub deletion_ratio_max: Option<f64>,
    pub deletion_ratio_min: Option<f64>,
    pub all_retained: bool,
    pub regained_count_ratio_min: Option<f64>,
    pub regained_mass_min: Option<f64>,
    /// Maximum |translated - anchor| task-probe accuracy gap, in points.
    pub translated_probe_gap_max: Option<f64>,
    /// At least this many erased-atom concepts must stay unrecovered...
    pub min_unrecovered_erased_aligned: usize,
    /// ...and at least one erased-atom concept must have F1 below this.
    pub erased_aligned_f1_max: Option<f64>,
    pub surviving_aligned_never_lost: bool,
    pub alignment_threshold: f64,
}

pub fn oracle_expectations(spec: &SynthSpec) -> ExpectedBounds {
    let mut b = ExpectedBounds {
        deletion_ratio_max: None,
        deletion_ratio_min: None,
        all_retained: false,
        regained_count_ratio_min: None,
        regained_mass_min: None,
        translated_probe_gap_max: None,
        min_unrecovered_erased_aligned: 0,
        erased_aligned_f1_max: None,
        surviving_aligned_never_lost: false,
        alignment_threshold: ALIGNMENT_THRESHOLD,
    };
    match spec.drift.kind {
        DriftKind::Identity => {
            b.deletion_ratio_max = Some(0.0);
            b.all_retained = true;
            b.translated_probe_gap_max = Some(0.0);
        }
        DriftKind::Rotation | DriftKind::RotationScaling | DriftKind::Affine => {
            if spec.drift.kind == DriftKind::Rotation {
                b.deletion_ratio_min = Some(0.2);
            }
            b.regained_count_ratio_min = Some(0.9);
            b.regained_mass_min = Some(0.8);
            b.translated_probe_gap_max = Some(2.0);
            b.surviving_aligned_never_lost = true;
        }
        DriftKind::Erasure => {
            b.min_unrecovered_erased_aligned = 1;
            b.erased_aligned_f1_max = Some(0.2);
            b.surviving_aligned_never_lost = true;
        }
        DriftKind::Nonlinear => {}
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DriftKind) -> SynthSpec {
        let mut s = SynthSpec::reference(DriftSpec::new(kind), 7);
        s.n_train = 200;
        s.n_test = 100;
        s
    }

    #[test]
    fn identity_drift_is_bitwise_copy() {
        let data = generate(&spec(DriftKind::Identity)).unwrap();
        assert_eq!(data.drifted[0].1.data(), data.anchor_test.data());
        assert_eq!(data.drifted[0].0.data(), data.anchor_train.data());
    }

    #[test]
    fn rotation_preserves_norms() {
        let data = generate(&spec(DriftKind::Rotation)).unwrap();
        let (a, _) = data.truth.drift.linear_part(16).unwrap();
        let gram = a.t().dot(&a);
        let err = (&gram - &Array2::<f64>::eye(16)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "orthogonality error {err}");
        let h = data.anchor_test.to_f64();
        let r = data.truth.drift.apply(h.view());
        for (x, y) in h.rows().into_iter().zip(r.rows()) {
            assert!((x.dot(&x).sqrt() - y.dot(&y).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn erasure_removes_atom_direction() {
        let mut s = spec(DriftKind::Erasure);
        s.noise_sigma = 0.0;
        s.drift = DriftSpec::erasure(vec![2], false);
        let data = generate(&s).unwrap();
        let atom = data.truth.dictionary.column(2).to_owned();
        let drifted = data.drifted[0].1.to_f64();
        for row in drifted.rows() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            assert!((row.dot(&atom) / norm).abs() <= 1e-6);
        }
    }

    #[test]
    fn codes_have_exactly_k_true_atoms_and_labels_follow_dominant_group() {
        let data = generate(&spec(DriftKind::Identity)).unwrap();
        let labels = data.anchor_train.labels().unwrap();
        for (row, &label) in data.truth.codes_train.rows().into_iter().zip(labels) {
            assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 3);
            assert!(row.iter().all(|&v| v == 0.0 || (0.5..=1.5).contains(&v)));
            let dom = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(dom as u32 / 2, label);
        }
    }

    #[test]
    fn deterministic_and_labels_shared() {
        let s = spec(DriftKind::Affine);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.drifted[0].1, b.drifted[0].1);
        assert_eq!(a.anchor_train, b.anchor_train);
        assert_eq!(a.drifted[0].0.labels(), a.anchor_train.labels());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(DriftKind::Identity);
        s.n_classes = 3;
        assert!(generate(&s).is_err());
        let mut s = spec(DriftKind::Erasure);
        s.drift.erased_atoms = vec![99];
        assert!(generate(&s).is_err());
    }

    #[test]
    fn alignment_matches_planted_atoms() {
        let data = generate(&spec(DriftKind::Identity)).unwrap();
        let dict = &data.truth.dictionary;
        let aligned = align_latents_to_atoms(dict.view(), dict.view(), ALIGNMENT_THRESHOLD);
        assert_eq!(aligned, (0..8).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn expectations_per_drift() {
        assert_eq!(
            oracle_expectations(&spec(DriftKind::Identity)).deletion_ratio_max,
            Some(0.0)
        );
        assert_eq!(
            oracle_expectations(&spec(DriftKind::Affine)).regained_count_ratio_min,
            Some(0.9)
        );
        assert_eq!(
            oracle_expectations(&spec(DriftKind::Erasure)).min_unrecovered_erased_aligned,
            1
        );
    }
}
