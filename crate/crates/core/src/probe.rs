//! L2-regularized logistic probes: task-level multiclass probes and
//! per-concept binary decodability probes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbfgs::{self, LbfgsOptions};
use crate::sae::LatentMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    TaskMulticlass,
    ConceptBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub l2_strength: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn task() -> Self {
        Self {
            kind: ProbeKind::TaskMulticlass,
            l2_strength: 1.0,
            max_iters: 1500,
            tol: 1e-6,
            class_weighting: ClassWeighting::None,
            seed: 0,
        }
    }

    pub fn concept() -> Self {
        Self {
            kind: ProbeKind::ConceptBinary,
            l2_strength: 1.0,
            max_iters: 1000,
            tol: 1e-6,
            class_weighting: ClassWeighting::Balanced,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidConfig("probe tol and max_iters must be positive".into()));
        }
        if !(self.l2_strength >= 0.0) {
            return Err(Error::InvalidConfig("probe l2_strength must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// classes x dim; a single row for binary probes (score > 0 means class 1).
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub n_classes: usize,
    pub converged: bool,
    pub diagnostics: TrainDiagnostics,
}

impl ProbeModel {
    pub fn is_binary(&self) -> bool {
        self.weights.nrows() == 1
    }

    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weights.ncols() {
            return Err(Error::DimensionMismatch {
                what: "probe input",
                expected: self.weights.ncols(),
                actual: x.ncols(),
            });
        }
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<u32>> {
        let s = self.scores(x)?;
        Ok(if self.is_binary() {
            s.column(0).iter().map(|&v| u32::from(v > 0.0)).collect()
        } else {
            s.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())).collect()
        })
    }
}

/// Index of the largest value, lowest index on ties.
fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Per-sample weights: 1, or N / (C * N_c) over the C classes present.
pub fn sample_weights(y: &[u32], n_classes: usize, weighting: ClassWeighting) -> Vec<f64> {
    match weighting {
        ClassWeighting::None => vec![1.0; y.len()],
        ClassWeighting::Balanced => {
            let mut counts = vec![0usize; n_classes];
            for &c in y {
                counts[c as usize] += 1;
            }
            let present = counts.iter().filter(|&&c| c > 0).count() as f64;
            let n = y.len() as f64;
            y.iter()
                .map(|&c| n / (present * counts[c as usize] as f64))
                .collect()
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Objective `(1/N) [sum_i s_i CE_i + (l2/2) ||W||^2]` and its gradient.
///
/// `params` holds `W` row-major (rows x dim) followed by the bias (rows).
/// `rows` is 1 for a binary probe, else the class count.
pub fn probe_objective(
    params: &[f64],
    x: ArrayView2<'_, f64>,
    y: &[u32],
    sample_weight: &[f64],
    rows: usize,
    l2: f64,
    grad: &mut [f64],
) -> f64 {
    let (n, d) = x.dim();
    let w = ArrayView2::from_shape((rows, d), &params[..rows * d]).expect("param layout");
    let b = &params[rows * d..];
    let mut logits = x.dot(&w.t());
    for mut row in logits.rows_mut() {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    // Residual r = dCE/dlogit, scaled by the sample weight.
    let mut resid = Array2::<f64>::zeros((n, rows));
    let mut loss = 0.0;
    for i in 0..n {
        let s = sample_weight[i];
        let yi = y[i] as usize;
        if rows == 1 {
            let z = logits[[i, 0]];
            loss += s * if yi == 1 { softplus(-z) } else { softplus(z) };
            resid[[i, 0]] = s * (sigmoid(z) - yi as f64);
        } else {
            let row = logits.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            loss += s * (lse - row[yi]);
            for c in 0..rows {
                let p = (row[c] - lse).exp();
                resid[[i, c]] = s * (p - if c == yi { 1.0 } else { 0.0 });
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let gw = resid.t().dot(&x);
    let gb = resid.sum_axis(Axis(0));
    let mut penalty = 0.0;
    for (k, (g, &p)) in grad[..rows * d].iter_mut().zip(&params[..rows * d]).enumerate() {
        *g = (gw[[k / d, k % d]] + l2 * p) * inv_n;
        penalty += p * p;
    }
    for (g, v) in grad[rows * d..].iter_mut().zip(gb.iter()) {
        *g = v * inv_n;
    }
    (loss + 0.5 * l2 * penalty) * inv_n
}

fn check_inputs(x: ArrayView2<'_, f64>, y: &[u32]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "probe labels",
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features".into()));
    }
    Ok(())
}

/// Fits a probe. Binary probes need labels in {0, 1}; multiclass probes use
/// `max(label) + 1` classes unless `n_classes` is larger.
pub fn fit_probe(
    x: ArrayView2<'_, f64>,
    y: &[u32],
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    config.validate()?;
    check_inputs(x, y)?;
    if y.is_empty() {
        return Err(Error::Empty("probe training set".into()));
    }
    let n_classes = n_classes.max(*y.iter().max().unwrap() as usize + 1);
    let first = y[0];
    if y.iter().all(|&c| c == first) {
        return Err(Error::SingleClass(first));
    }
    let rows = match config.kind {
        ProbeKind::ConceptBinary => {
            if n_classes != 2 {
                return Err(Error::InvalidConfig(format!(
                    "binary probe got {n_classes} classes"
                )));
            }
            1
        }
        ProbeKind::TaskMulticlass if n_classes == 2 => 1,
        ProbeKind::TaskMulticlass => n_classes,
    };
    let d = x.ncols();
    let sw = sample_weights(y, n_classes, config.class_weighting);
    let opts = LbfgsOptions {
        max_iters: config.max_iters,
        tol: config.tol,
        ..Default::default()
    };
    let result = lbfgs::minimize(
        |p, g| probe_objective(p, x, y, &sw, rows, config.l2_strength, g),
        vec![0.0; rows * d + rows],
        &opts,
    );
    if !result.value.is_finite() || result.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("probe objective diverged".into()));
    }
    let weights = Array2::from_shape_vec((rows, d), result.x[..rows * d].to_vec())
        .expect("param layout");
    let bias = Array1::from(result.x[rows * d..].to_vec());
    Ok(ProbeModel {
        weights,
        bias,
        n_classes,
        converged: result.converged,
        diagnostics: TrainDiagnostics {
            iterations: result.iterations,
            final_loss: result.value,
            grad_norm: result.grad_norm,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Positive-class F1; binary probes only.
    pub f1: Option<f64>,
}

/// Metrics for predictions against labels. `binary` enables F1 on class 1.
pub fn score_predictions(pred: &[u32], y: &[u32], binary: bool) -> Result<ProbeScores> {
    if pred.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions",
            expected: y.len(),
            actual: pred.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::Empty("evaluation labels".into()));
    }
    let n_classes = y.iter().chain(pred).max().copied().unwrap() as usize + 1;
    let mut support = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(y) {
        support[t as usize] += 1;
        if p == t {
            hits[t as usize] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let present: Vec<usize> = (0..n_classes).filter(|&c| support[c] > 0).collect();
    let balanced_accuracy = present
        .iter()
        .map(|&c| hits[c] as f64 / support[c] as f64)
        .sum::<f64>()
        / present.len() as f64;
    let f1 = binary.then(|| {
        let tp = pred.iter().zip(y).filter(|&(&p, &t)| p == 1 && t == 1).count();
        let fp = pred.iter().zip(y).filter(|&(&p, &t)| p == 1 && t != 1).count();
        let fn_ = pred.iter().zip(y).filter(|&(&p, &t)| p != 1 && t == 1).count();
        let denom = 2 * tp + fp + fn_;
        if tp == 0 || denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    });
    Ok(ProbeScores {
        accuracy: correct as f64 / y.len() as f64,
        balanced_accuracy,
        f1,
    })
}

pub fn evaluate(model: &ProbeModel, x: ArrayView2<'_, f64>, y: &[u32]) -> Result<ProbeScores> {
    check_inputs(x, y)?;
    let pred = model.predict(x)?;
    score_predictions(&pred, y, model.n_classes == 2)
}

/// `y_k(x) = [z_k(x) > 0]` on anchor latents.
pub fn concept_labels(z_anchor: &LatentMatrix, neuron: usize) -> Result<Vec<u32>> {
    if neuron >= z_anchor.latent_dim() {
        return Err(Error::IndexOutOfRange {
            index: neuron,
            len: z_anchor.latent_dim(),
        });
    }
    Ok(z_anchor
        .data
        .column(neuron)
        .iter()
        .map(|&v| u32::from(v > 0.0))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePanel {
    pub at_t: f64,
    pub raw_after: f64,
    pub translated: f64,
    pub converged: bool,
}

/// Trains one probe on anchor train data and scores it on the three test
/// variants.
pub fn task_probe_panel(
    anchor_train: ArrayView2<'_, f64>,
    train_labels: &[u32],
    anchor_test: ArrayView2<'_, f64>,
    raw_after_test: ArrayView2<'_, f64>,
    translated_test: ArrayView2<'_, f64>,
    test_labels: &[u32],
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbePanel> {
    let model = fit_probe(anchor_train, train_labels, n_classes, config)?;
    let acc = |x| evaluate(&model, x, test_labels).map(|s| s.accuracy);
    Ok(ProbePanel {
        at_t: acc(anchor_test)?,
        raw_after: acc(raw_after_test)?,
        translated: acc(translated_test)?,
        converged: model.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptProbeResult {
    pub concept: usize,
    pub scores: Option<ProbeScores>,
    pub converged: Option<bool>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodabilityReport {
    pub concepts: Vec<ConceptProbeResult>,
    pub balanced_accuracy: Option<Distribution>,
    pub f1: Option<Distribution>,
}

impl DecodabilityReport {
    pub fn get(&self, concept: usize) -> Option<&ConceptProbeResult> {
        self.concepts.iter().find(|c| c.concept == concept)
    }
}

/// One binary probe per concept: trained on later-checkpoint train features
/// against anchor-latent labels, scored on the later-checkpoint test split.
/// Concepts whose train labels hold a single class are skipped.
pub fn concept_decodability(
    concepts: &[usize],
    z_anchor_test: &LatentMatrix,
    x_after_test: ArrayView2<'_, f64>,
    x_after_train: ArrayView2<'_, f64>,
    z_anchor_train: &LatentMatrix,
    config: &ProbeConfig,
) -> Result<DecodabilityReport> {
    let results: Vec<ConceptProbeResult> = concepts
        .par_iter()
        .map(|&k| -> Result<ConceptProbeResult> {
            let y_train = concept_labels(z_anchor_train, k)?;
            let y_test = concept_labels(z_anchor_test, k)?;
            let positives = y_train.iter().filter(|&&v| v == 1).count();
            if positives == 0 || positives == y_train.len() {
                return Ok(ConceptProbeResult {
                    concept: k,
                    scores: None,
                    converged: None,
                    skipped: Some(format!(
                        "single-class train labels ({positives} of {} positive)",
                        y_train.len()
                    )),
                });
            }
            let model = fit_probe(x_after_train, &y_train, 2, config)?;
            let scores = evaluate(&model, x_after_test, &y_test)?;
            Ok(ConceptProbeResult {
                concept: k,
                scores: Some(scores),
                converged: Some(model.converged),
                skipped: None,
            })
        })
        .collect::<Result<_>>()?;
    let scored: Vec<ProbeScores> = results.iter().filter_map(|r| r.scores).collect();
    let ba: Vec<f64> = scored.iter().map(|s| s.balanced_accuracy).collect();
    let f1: Vec<f64> = scored.iter().filter_map(|s| s.f1).collect();
    Ok(DecodabilityReport {
        concepts: results,
        balanced_accuracy: Distribution::of(&ba),
        f1: Distribution::of(&f1),
    })
}
