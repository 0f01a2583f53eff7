//! Recovery maps from a later checkpoint's feature space back to the anchor
//! space: an affine map fitted by AdamW or in closed form, and a small
//! three-layer GELU network as a nonlinear baseline.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::blob::quantize_f32;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::feature_store::{FeatureMatrix, PairedView};

pub const LINEAR_MANIFEST: &str = "translator.json";
pub const NONLINEAR_MANIFEST: &str = "nonlinear_translator.json";
pub const DEFAULT_RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "translator epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "translator lr must be positive and weight_decay nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// How a linear translator was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearFit {
    Gradient(TranslatorConfig),
    ClosedForm { ridge_lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTranslator {
    /// target_dim x source_dim
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub fit: LinearFit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinearMeta {
    source_dim: usize,
    target_dim: usize,
    train_mse: f64,
    val_mse: Option<f64>,
    fit: LinearFit,
}

impl LinearTranslator {
    pub fn identity(d: usize) -> Self {
        Self {
            w: Array2::eye(d),
            b: Array1::zeros(d),
            train_mse: 0.0,
            val_mse: None,
            fit: LinearFit::ClosedForm { ridge_lambda: 0.0 },
        }
    }

    pub fn source_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn apply_array(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("translator input", self.source_dim(), x.ncols())?;
        Ok(x.dot(&self.w.t()) + &self.b)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let meta = LinearMeta {
            source_dim: self.source_dim(),
            target_dim: self.target_dim(),
            train_mse: self.train_mse,
            val_mse: self.val_mse,
            fit: self.fit,
        };
        checkpoint::write_checkpoint(
            dir,
            LINEAR_MANIFEST,
            "linear_translator",
            &meta,
            &[("w", self.w.view().into_dyn()), ("b", self.b.view().into_dyn())],
        )
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let (meta, mut params): (LinearMeta, _) =
            checkpoint::read_checkpoint(manifest, "linear_translator")?;
        let out = Self {
            w: checkpoint::take_param(&mut params, "w", manifest)?,
            b: checkpoint::take_param(&mut params, "b", manifest)?,
            train_mse: meta.train_mse,
            val_mse: meta.val_mse,
            fit: meta.fit,
        };
        if out.w.dim() != (meta.target_dim, meta.source_dim) || out.b.len() != meta.target_dim {
            return Err(Error::schema(manifest, "parameter shapes disagree with manifest"));
        }
        Ok(out)
    }
}

/// Applies a translator row-wise; the output keeps the input's labels and key.
pub fn apply(translator: &LinearTranslator, features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let out = translator.apply_array(features.to_f64().view())?;
    FeatureMatrix::from_f64(
        &out,
        features.labels().map(<[u32]>::to_vec),
        features.label_count(),
        features.key(),
    )
}

fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Mean squared error per element.
pub fn mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t))
        / n as f64
}

/// Seeded split of `0..n` into (train, validation) rows. The validation rows
/// are the last `round(n * val_fraction)` positions of a seeded shuffle, so
/// they depend only on `n`, the fraction and the seed.
pub fn validation_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn paired_arrays(paired: &PairedView<'_>) -> Result<(Array2<f64>, Array2<f64>)> {
    if paired.n_samples() < 2 {
        return Err(Error::Empty(format!(
            "translator needs at least 2 paired rows, got {}",
            paired.n_samples()
        )));
    }
    Ok((paired.source.to_f64(), paired.target.to_f64()))
}

/// Parameters trained by the shared AdamW loop.
trait Trainable {
    /// (length, decayed) per parameter slot.
    fn slots(&self) -> Vec<(usize, bool)>;
    fn loss_gradient(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, Vec<Vec<f64>>);
    fn param_slices(&mut self) -> Vec<&mut [f64]>;
    fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;
}

struct FitOutcome {
    train_mse: f64,
    val_mse: Option<f64>,
}

fn train<M: Trainable>(
    model: &mut M,
    x: &Array2<f64>,
    y: &Array2<f64>,
    config: &TranslatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FitOutcome> {
    let (mut train_idx, val_idx) = validation_split(x.nrows(), config.val_fraction, config.seed);
    let slots = model.slots();
    let sizes: Vec<usize> = slots.iter().map(|s| s.0).collect();
    let mut opt = Adam::new(
        AdamConfig::new(config.lr).with_weight_decay(config.weight_decay),
        &sizes,
    );
    for epoch in 0..config.epochs {
        train_idx.shuffle(rng);
        for chunk in train_idx.chunks(config.batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by = y.select(Axis(0), chunk);
            let (loss, grads) = model.loss_gradient(bx.view(), by.view());
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "translator loss diverged at epoch {epoch}"
                )));
            }
            opt.begin_step();
            for (slot, (param, grad)) in model.param_slices().into_iter().zip(&grads).enumerate() {
                opt.update(slot, param, grad, slots[slot].1);
            }
        }
    }
    for p in model.param_slices() {
        for v in p.iter_mut() {
            if !v.is_finite() {
                return Err(Error::Numerical("non-finite translator parameter".into()));
            }
            *v = quantize_f32(*v);
        }
    }
    train_idx.sort_unstable();
    let score = |rows: &[usize]| {
        let bx = x.select(Axis(0), rows);
        let by = y.select(Axis(0), rows);
        mse(model.predict(bx.view()).view(), by.view())
    };
    Ok(FitOutcome {
        train_mse: score(&train_idx),
        val_mse: (!val_idx.is_empty()).then(|| score(&val_idx)),
    })
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn uniform_bias(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..bound))
}

/// Gradient of the mean squared error w.r.t. the prediction.
fn mse_grad(pred: &Array2<f64>, y: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let r = pred - &y;
    let n = r.len() as f64;
    let loss = r.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, r * (2.0 / n))
}

fn flat(a: Array2<f64>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

impl Trainable for LinearTranslator {
    fn slots(&self) -> Vec<(usize, bool)> {
        vec![(self.w.len(), true), (self.b.len(), false)]
    }

    fn loss_gradient(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, Vec<Vec<f64>>) {
        let pred = x.dot(&self.w.t()) + &self.b;
        let (loss, g) = mse_grad(&pred, y);
        let gw = g.t().dot(&x);
        let gb = g.sum_axis(Axis(0));
        (loss, vec![flat(gw), gb.to_vec()])
    }

    fn param_slices(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("contiguous"),
        ]
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

/// Fits `W h_src + b ≈ h_tgt` by AdamW on mean squared error. Decay applies to
/// `W` only.
pub fn fit_linear(paired: &PairedView<'_>, config: &TranslatorConfig) -> Result<LinearTranslator> {
    config.validate()?;
    let (x, y) = paired_arrays(paired)?;
    let (d_in, d_out) = (x.ncols(), y.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LinearTranslator {
        w: uniform_init(d_out, d_in, d_in, &mut rng),
        b: uniform_bias(d_out, d_in, &mut rng),
        train_mse: f64::NAN,
        val_mse: None,
        fit: LinearFit::Gradient(*config),
    };
    let outcome = train(&mut model, &x, &y, config, &mut rng)?;
    model.train_mse = outcome.train_mse;
    model.val_mse = outcome.val_mse;
    Ok(model)
}

/// Exact ridge solution over all paired rows. The bias column is not
/// penalized, so a huge `ridge_lambda` drives `W` to zero and `b` to the
/// target mean.
pub fn fit_linear_closed_form(paired: &PairedView<'_>, ridge_lambda: f64) -> Result<LinearTranslator> {
    if !(ridge_lambda >= 0.0) || !ridge_lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("ridge_lambda {ridge_lambda}")));
    }
    let (x, y) = paired_arrays(paired)?;
    let (n, d_in) = x.dim();
    let d_out = y.ncols();
    let p = d_in + 1;
    let aug = DMatrix::from_fn(n, p, |i, j| if j < d_in { x[[i, j]] } else { 1.0 });
    let target = DMatrix::from_fn(n, d_out, |i, j| y[[i, j]]);
    let mut gram = aug.transpose() * &aug;
    for j in 0..d_in {
        gram[(j, j)] += ridge_lambda;
    }
    let rhs = aug.transpose() * target;
    let theta = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Numerical("normal equations are singular".into()))?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("normal equations are singular".into()));
    }
    let w = Array2::from_shape_fn((d_out, d_in), |(o, i)| quantize_f32(theta[(i, o)]));
    let b = Array1::from_shape_fn(d_out, |o| quantize_f32(theta[(d_in, o)]));
    let mut model = LinearTranslator {
        w,
        b,
        train_mse: 0.0,
        val_mse: None,
        fit: LinearFit::ClosedForm { ridge_lambda },
    };
    model.train_mse = mse(model.predict(x.view()).view(), y.view());
    Ok(model)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out x in
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

/// Three affine layers with GELU after the first two; hidden width equals the
/// input width.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearTranslator {
    pub layers: [Layer; 3],
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub config: TranslatorConfig,
}

/// Gradients for the three layers, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearGradient {
    pub w: [Array2<f64>; 3],
    pub b: [Array1<f64>; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NonlinearMeta {
    source_dim: usize,
    target_dim: usize,
    train_mse: f64,
    val_mse: Option<f64>,
    config: TranslatorConfig,
}

impl NonlinearTranslator {
    pub fn init(d_in: usize, d_out: usize, config: TranslatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = |i: usize, o: usize| Layer {
            w: uniform_init(o, i, i, rng),
            b: uniform_bias(o, i, rng),
        };
        let layers = [layer(d_in, d_in), layer(d_in, d_in), layer(d_in, d_out)];
        Self {
            layers,
            train_mse: f64::NAN,
            val_mse: None,
            config,
        }
    }

    pub fn source_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.layers[2].w.nrows()
    }

    pub fn apply_array(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("translator input", self.source_dim(), x.ncols())?;
        Ok(self.predict(x))
    }

    /// Mean squared error and its gradient on one batch.
    pub fn loss_gradient(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
    ) -> Result<(f64, NonlinearGradient)> {
        check_dim("translator input", self.source_dim(), x.ncols())?;
        check_dim("translator target", self.target_dim(), y.ncols())?;
        let [l1, l2, l3] = &self.layers;
        let a1 = l1.forward(x);
        let h1 = a1.mapv(gelu);
        let a2 = l2.forward(h1.view());
        let h2 = a2.mapv(gelu);
        let out = l3.forward(h2.view());
        let (loss, d_out) = mse_grad(&out, y);

        let gw3 = d_out.t().dot(&h2);
        let gb3 = d_out.sum_axis(Axis(0));
        let mut d2 = d_out.dot(&l3.w);
        Zip::from(&mut d2).and(&a2).for_each(|g, &a| *g *= gelu_prime(a));
        let gw2 = d2.t().dot(&h1);
        let gb2 = d2.sum_axis(Axis(0));
        let mut d1 = d2.dot(&l2.w);
        Zip::from(&mut d1).and(&a1).for_each(|g, &a| *g *= gelu_prime(a));
        let gw1 = d1.t().dot(&x);
        let gb1 = d1.sum_axis(Axis(0));
        Ok((
            loss,
            NonlinearGradient {
                w: [gw1, gw2, gw3],
                b: [gb1, gb2, gb3],
            },
        ))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let meta = NonlinearMeta {
            source_dim: self.source_dim(),
            target_dim: self.target_dim(),
            train_mse: self.train_mse,
            val_mse: self.val_mse,
            config: self.config,
        };
        let [l1, l2, l3] = &self.layers;
        checkpoint::write_checkpoint(
            dir,
            NONLINEAR_MANIFEST,
            "nonlinear_translator",
            &meta,
            &[
                ("w1", l1.w.view().into_dyn()),
                ("b1", l1.b.view().into_dyn()),
                ("w2", l2.w.view().into_dyn()),
                ("b2", l2.b.view().into_dyn()),
                ("w3", l3.w.view().into_dyn()),
                ("b3", l3.b.view().into_dyn()),
            ],
        )
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let (meta, mut params): (NonlinearMeta, _) =
            checkpoint::read_checkpoint(manifest, "nonlinear_translator")?;
        let mut layer = |w: &str, b: &str| -> Result<Layer> {
            Ok(Layer {
                w: checkpoint::take_param(&mut params, w, manifest)?,
                b: checkpoint::take_param(&mut params, b, manifest)?,
            })
        };
        let layers = [layer("w1", "b1")?, layer("w2", "b2")?, layer("w3", "b3")?];
        let (d_in, d_out) = (meta.source_dim, meta.target_dim);
        let shapes_ok = layers[0].w.dim() == (d_in, d_in)
            && layers[1].w.dim() == (d_in, d_in)
            && layers[2].w.dim() == (d_out, d_in)
            && layers.iter().all(|l| l.b.len() == l.w.nrows());
        if !shapes_ok {
            return Err(Error::schema(manifest, "parameter shapes disagree with manifest"));
        }
        Ok(Self {
            layers,
            train_mse: meta.train_mse,
            val_mse: meta.val_mse,
            config: meta.config,
        })
    }
}

impl Trainable for NonlinearTranslator {
    fn slots(&self) -> Vec<(usize, bool)> {
        self.layers
            .iter()
            .flat_map(|l| [(l.w.len(), true), (l.b.len(), false)])
            .collect()
    }

    fn loss_gradient(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, Vec<Vec<f64>>) {
        let (loss, g) = NonlinearTranslator::loss_gradient(self, x, y)
            .expect("dimensions checked before training");
        let NonlinearGradient { w, b } = g;
        let mut out = Vec::with_capacity(6);
        for (gw, gb) in w.into_iter().zip(b) {
            out.push(flat(gw));
            out.push(gb.to_vec());
        }
        (loss, out)
    }

    fn param_slices(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(6);
        for l in self.layers.iter_mut() {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("contiguous"));
        }
        out
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let h1 = self.layers[0].forward(x).mapv(gelu);
        let h2 = self.layers[1].forward(h1.view()).mapv(gelu);
        self.layers[2].forward(h2.view())
    }
}

pub fn fit_nonlinear(
    paired: &PairedView<'_>,
    config: &TranslatorConfig,
) -> Result<NonlinearTranslator> {
    config.validate()?;
    let (x, y) = paired_arrays(paired)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = NonlinearTranslator::init(x.ncols(), y.ncols(), *config, &mut rng);
    let outcome = train(&mut model, &x, &y, config, &mut rng)?;
    model.train_mse = outcome.train_mse;
    model.val_mse = outcome.val_mse;
    Ok(model)
}
