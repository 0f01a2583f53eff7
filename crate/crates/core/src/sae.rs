//! Task-anchored BatchTopK sparse autoencoders.
//!
//! Encoding computes `p = ReLU(W_enc h + b_enc)` and keeps only the largest
//! entries: batch-globally (`batch_size * k` per batch) while training and per
//! sample (`k` per row) at inference, so that inference is independent of how
//! rows are batched. Decoding is affine, `h_hat = W_dec z + b_dec`.
//!
//! Training minimizes the reconstruction MSE plus a weighted auxiliary loss
//! that reactivates dead latents: a latent is dead once it has not been
//! selected for `dead_window_steps` optimizer steps, and the auxiliary term is
//! the MSE between the reconstruction residual and a reconstruction built from
//! the `aux_k` largest dead pre-activations (before the ReLU) of each sample. Selections are held
//! fixed when differentiating (straight-through on the mask).

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::blob::quantize_f32;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::feature_store::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub input_dim: usize,
    /// Latent width as a multiple of `input_dim`.
    pub expansion: f64,
    /// Per-sample active budget.
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dead_loss_weight: f64,
    pub dead_window_steps: usize,
    /// Dead latents used by the auxiliary reconstruction; defaults to `k`.
    #[serde(default)]
    pub aux_k: Option<usize>,
    pub seed: u64,
}

impl SaeConfig {
    /// Defaults: batch 16, K 10, 10 epochs, lr 5e-3, expansion 2, dead-loss
    /// weight 1e-2.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            expansion: 2.0,
            k: 10,
            epochs: 10,
            lr: 5e-3,
            batch_size: 16,
            dead_loss_weight: 1e-2,
            dead_window_steps: 100,
            aux_k: None,
            seed: 0,
        }
    }

    pub fn latent_dim(&self) -> usize {
        (self.expansion * self.input_dim as f64).round() as usize
    }

    pub fn aux_k(&self) -> usize {
        self.aux_k.unwrap_or(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        let latent = self.latent_dim();
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_dim == 0 || latent == 0 {
            return bad(format!(
                "input_dim {} and latent_dim {latent} must be positive",
                self.input_dim
            ));
        }
        if self.k == 0 || self.k > latent {
            return bad(format!("k = {} must lie in [1, {latent}]", self.k));
        }
        if self.aux_k() > latent {
            return bad(format!("aux_k = {} exceeds latent_dim {latent}", self.aux_k()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.dead_loss_weight >= 0.0) {
            return bad("lr must be positive and dead_loss_weight nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeDiagnostics {
    pub r2: f64,
    pub dead_rate: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// latent_dim x input_dim
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// input_dim x latent_dim
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub config: SaeConfig,
    pub diagnostics: SaeDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Task-t data encoded at task t.
    Anchor,
    /// Task-t data encoded after further training.
    RawAfter,
    /// Later-checkpoint data mapped back by the translator.
    Translated,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Anchor => "anchor",
            Variant::RawAfter => "raw_after",
            Variant::Translated => "translated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Keep the `rows * k` largest entries of each batch of `batch_size` rows.
    TrainBatch,
    /// Keep the `k` largest entries of each row.
    Inference,
}

/// Nonnegative sparse codes in the coordinate system of one SAE.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    pub data: Array2<f64>,
    pub source_task: u32,
    pub eval_checkpoint: u32,
    pub variant: Variant,
}

impl LatentMatrix {
    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn max_row_support(&self) -> usize {
        self.data
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&v| v != 0.0).count())
            .max()
            .unwrap_or(0)
    }
}

/// Gradient of the SAE loss, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradient {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

/// Orders by value descending, then index ascending.
fn rank_desc(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b]
        .partial_cmp(&values[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `m` largest values (ties to the lower index), in no
/// particular order.
pub fn top_indices(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if m >= values.len() {
        return idx;
    }
    if m == 0 {
        return Vec::new();
    }
    idx.select_nth_unstable_by(m - 1, |&a, &b| rank_desc(values, a, b));
    idx.truncate(m);
    idx
}

/// Per-row selection mask keeping the `k` largest entries of each row.
pub fn row_topk_mask(values: &Array2<f64>, k: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem(values.dim(), false);
    for (row, mut mrow) in values.rows().into_iter().zip(mask.rows_mut()) {
        let row = row.to_vec();
        for j in top_indices(&row, k) {
            mrow[j] = true;
        }
    }
    mask
}

/// Batch-global selection mask keeping the `m` largest entries overall, ties
/// broken by row-major position.
pub fn batch_topk_mask(values: &Array2<f64>, m: usize) -> Array2<bool> {
    let flat: Vec<f64> = values.iter().copied().collect();
    let mut mask = vec![false; flat.len()];
    for j in top_indices(&flat, m) {
        mask[j] = true;
    }
    Array2::from_shape_vec(values.dim(), mask).expect("same shape")
}

impl SaeModel {
    pub fn input_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_enc.nrows()
    }

    /// `ReLU(X W_enc^T + b_enc)` for a batch of rows.
    pub fn pre_activations(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut p = x.dot(&self.w_enc.t());
        p += &self.b_enc;
        p.mapv_inplace(|v| v.max(0.0));
        p
    }

    /// Sparse codes for the rows of `x`.
    pub fn encode_array(&self, x: ArrayView2<'_, f64>, mode: EncodeMode) -> Result<Array2<f64>> {
        check_dim("encoder input", self.input_dim(), x.ncols())?;
        let p = self.pre_activations(x);
        let mask = match mode {
            EncodeMode::Inference => row_topk_mask(&p, self.config.k),
            EncodeMode::TrainBatch => {
                let mut mask = Array2::from_elem(p.dim(), false);
                let bs = self.config.batch_size.max(1);
                let mut start = 0;
                while start < p.nrows() {
                    let end = (start + bs).min(p.nrows());
                    let block = p.slice(s![start..end, ..]).to_owned();
                    let m = batch_topk_mask(&block, (end - start) * self.config.k);
                    mask.slice_mut(s![start..end, ..]).assign(&m);
                    start = end;
                }
                mask
            }
        };
        Ok(apply_mask(&p, &mask))
    }

    pub fn decode_array(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("decoder input", self.latent_dim(), z.ncols())?;
        let mut h = z.dot(&self.w_dec.t());
        h += &self.b_dec;
        Ok(h)
    }

    /// Loss on a batch with the given dead-latent mask.
    pub fn loss(&self, batch: ArrayView2<'_, f64>, dead: &[bool]) -> Result<f64> {
        Ok(self.forward(batch, dead)?.loss)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let meta = SaeMeta {
            input_dim: self.input_dim(),
            latent_dim: self.latent_dim(),
            config: self.config.clone(),
            diagnostics: self.diagnostics,
        };
        checkpoint::write_checkpoint(
            dir,
            SAE_MANIFEST,
            "sae",
            &meta,
            &[
                ("w_enc", self.w_enc.view().into_dyn()),
                ("b_enc", self.b_enc.view().into_dyn()),
                ("w_dec", self.w_dec.view().into_dyn()),
                ("b_dec", self.b_dec.view().into_dyn()),
            ],
        )
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let (meta, mut params): (SaeMeta, _) = checkpoint::read_checkpoint(manifest, "sae")?;
        let model = SaeModel {
            w_enc: checkpoint::take_param(&mut params, "w_enc", manifest)?,
            b_enc: checkpoint::take_param(&mut params, "b_enc", manifest)?,
            w_dec: checkpoint::take_param(&mut params, "w_dec", manifest)?,
            b_dec: checkpoint::take_param(&mut params, "b_dec", manifest)?,
            config: meta.config,
            diagnostics: meta.diagnostics,
        };
        let (l, d) = (meta.latent_dim, meta.input_dim);
        if model.w_enc.dim() != (l, d)
            || model.w_dec.dim() != (d, l)
            || model.b_enc.len() != l
            || model.b_dec.len() != d
        {
            return Err(Error::schema(manifest, "parameter shapes disagree with manifest"));
        }
        Ok(model)
    }

    fn forward(&self, x: ArrayView2<'_, f64>, dead: &[bool]) -> Result<Forward> {
        let (b, d) = x.dim();
        check_dim("batch", self.input_dim(), d)?;
        check_dim("dead mask", self.latent_dim(), dead.len())?;
        if b == 0 {
            return Err(Error::Empty("SAE batch".into()));
        }
        let pre = {
            let mut p = x.dot(&self.w_enc.t());
            p += &self.b_enc;
            p
        };
        let act = pre.mapv(|v| v.max(0.0));
        let mask = batch_topk_mask(&act, b * self.config.k);
        let z = apply_mask(&act, &mask);
        let mut recon = z.dot(&self.w_dec.t());
        recon += &self.b_dec;
        let residual = &x - &recon;
        let scale = 1.0 / (b * d) as f64;
        let mse = residual.iter().map(|e| e * e).sum::<f64>() * scale;

        let weight = self.config.dead_loss_weight;
        let aux = if weight > 0.0 && dead.iter().any(|&v| v) {
            let dead_pre = Array2::from_shape_fn(pre.dim(), |(i, j)| {
                if dead[j] {
                    pre[[i, j]]
                } else {
                    f64::NEG_INFINITY
                }
            });
            let n_dead = dead.iter().filter(|&&v| v).count();
            let aux_mask = row_topk_mask(&dead_pre, self.config.aux_k().min(n_dead));
            // Raw pre-activations, so latents stuck below zero still get a gradient.
            let z_aux = apply_mask(&pre, &aux_mask);
            let aux_recon = z_aux.dot(&self.w_dec.t());
            let aux_residual = &residual - &aux_recon;
            let loss = aux_residual.iter().map(|e| e * e).sum::<f64>() * scale;
            Some(AuxForward {
                mask: aux_mask,
                z: z_aux,
                residual: aux_residual,
                loss,
            })
        } else {
            None
        };
        let loss = mse + aux.as_ref().map_or(0.0, |a| weight * a.loss);
        Ok(Forward {
            pre,
            mask,
            z,
            residual,
            aux,
            loss,
        })
    }
}

struct AuxForward {
    mask: Array2<bool>,
    z: Array2<f64>,
    residual: Array2<f64>,
    loss: f64,
}

struct Forward {
    pre: Array2<f64>,
    mask: Array2<bool>,
    z: Array2<f64>,
    residual: Array2<f64>,
    aux: Option<AuxForward>,
    loss: f64,
}

const SAE_MANIFEST: &str = "sae.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SaeMeta {
    input_dim: usize,
    latent_dim: usize,
    config: SaeConfig,
    diagnostics: SaeDiagnostics,
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

fn apply_mask(values: &Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
    let mut out = values.clone();
    Zip::from(&mut out).and(mask).for_each(|v, &keep| {
        if !keep {
            *v = 0.0;
        }
    });
    out
}

/// Encodes a feature matrix into the SAE's latent coordinates.
pub fn encode(
    model: &SaeModel,
    features: &FeatureMatrix,
    mode: EncodeMode,
    variant: Variant,
) -> Result<LatentMatrix> {
    let key = features.key();
    Ok(LatentMatrix {
        data: model.encode_array(features.to_f64().view(), mode)?,
        source_task: key.task_id,
        eval_checkpoint: key.checkpoint_id,
        variant,
    })
}

pub fn decode(model: &SaeModel, latents: &LatentMatrix) -> Result<Array2<f64>> {
    model.decode_array(latents.data.view())
}

/// Loss and analytic gradient of the full SAE objective on one batch.
pub fn sae_loss_gradient(
    model: &SaeModel,
    batch: ArrayView2<'_, f64>,
    dead: &[bool],
) -> Result<(f64, SaeGradient)> {
    let (fwd, grad) = forward_backward(model, batch, dead)?;
    Ok((fwd.loss, grad))
}

fn forward_backward(
    model: &SaeModel,
    batch: ArrayView2<'_, f64>,
    dead: &[bool],
) -> Result<(Forward, SaeGradient)> {
    let fwd = model.forward(batch, dead)?;
    let (b, d) = batch.dim();
    let scale = 2.0 / (b * d) as f64;
    let weight = model.config.dead_loss_weight;

    // dL/d(recon) = -scale * (residual + weight * aux_residual)
    let mut g_recon = fwd.residual.mapv(|e| -scale * e);
    if let Some(aux) = &fwd.aux {
        g_recon.scaled_add(-scale * weight, &aux.residual);
    }
    let mut w_dec = g_recon.t().dot(&fwd.z);
    let b_dec = g_recon.sum_axis(Axis(0));
    let mut g_act = g_recon.dot(&model.w_dec);
    Zip::from(&mut g_act)
        .and(&fwd.mask)
        .for_each(|g, &keep| {
            if !keep {
                *g = 0.0;
            }
        });

    Zip::from(&mut g_act).and(&fwd.pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });

    if let Some(aux) = &fwd.aux {
        // The auxiliary reconstruction enters its residual with a minus sign.
        let g_aux = aux.residual.mapv(|e| -scale * weight * e);
        w_dec += &g_aux.t().dot(&aux.z);
        let g_aux_pre = g_aux.dot(&model.w_dec);
        Zip::from(&mut g_act)
            .and(&g_aux_pre)
            .and(&aux.mask)
            .for_each(|g, &ga, &keep| {
                if keep {
                    *g += ga;
                }
            });
    }
    let w_enc = g_act.t().dot(&batch);
    let b_enc = g_act.sum_axis(Axis(0));
    Ok((
        fwd,
        SaeGradient {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        },
    ))
}

/// `1 - ||H - H_hat||^2 / ||H - colmean(H)||^2`.
pub fn r2_score(h: ArrayView2<'_, f64>, h_hat: ArrayView2<'_, f64>) -> Result<f64> {
    if h.dim() != h_hat.dim() {
        return Err(Error::DimensionMismatch {
            what: "reconstruction",
            expected: h.len(),
            actual: h_hat.len(),
        });
    }
    let mean = h
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Empty("R^2 input".into()))?;
    let sse: f64 = Zip::from(&h).and(&h_hat).fold(0.0, |acc, &a, &b| acc + (a - b).powi(2));
    let sst: f64 = (&h - &mean).iter().map(|v| v * v).sum();
    if sst == 0.0 {
        return Err(Error::Numerical("R^2 undefined for zero-variance features".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Reconstruction R^2 with inference-mode encoding.
pub fn r2(model: &SaeModel, features: &FeatureMatrix) -> Result<f64> {
    let h = features.to_f64();
    let z = model.encode_array(h.view(), EncodeMode::Inference)?;
    let h_hat = model.decode_array(z.view())?;
    r2_score(h.view(), h_hat.view())
}

/// Fraction of latents that are zero on every row under inference encoding.
pub fn dead_rate(model: &SaeModel, features: &FeatureMatrix) -> Result<f64> {
    let z = model.encode_array(features.to_f64().view(), EncodeMode::Inference)?;
    let dead = z
        .columns()
        .into_iter()
        .filter(|c| c.iter().all(|&v| v == 0.0))
        .count();
    Ok(dead as f64 / z.ncols() as f64)
}

/// Unit-norm Gaussian encoder rows, tied decoder, the data mean as decoder
/// bias and an encoder bias that maps that mean to zero pre-activation.
pub fn init_model(config: &SaeConfig, data: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng) -> SaeModel {
    let d = config.input_dim;
    let l = config.latent_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut w_enc = Array2::from_shape_simple_fn((l, d), || {
        let g: f64 = StandardNormal.sample(rng);
        g * scale
    });
    for mut row in w_enc.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let w_dec = w_enc.t().as_standard_layout().into_owned();
    let b_dec = data
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(d));
    // Centre the encoder on the data mean so every unit starts near its threshold.
    let b_enc = -w_enc.dot(&b_dec);
    SaeModel {
        w_enc,
        b_enc,
        w_dec,
        b_dec,
        config: config.clone(),
        diagnostics: SaeDiagnostics {
            r2: f64::NAN,
            dead_rate: f64::NAN,
            final_loss: f64::NAN,
        },
    }
}

/// Trains an SAE on a train-split feature matrix.
pub fn train_sae(features: &FeatureMatrix, config: &SaeConfig) -> Result<SaeModel> {
    config.validate()?;
    check_dim("SAE training features", config.input_dim, features.dim())?;
    let n = features.n_samples();
    if n < config.batch_size {
        return Err(Error::InvalidConfig(format!(
            "{n} samples is fewer than batch_size {}",
            config.batch_size
        )));
    }
    let data = features.to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_model(config, data.view(), &mut rng);
    let (l, d) = (model.latent_dim(), model.input_dim());

    let mut opt = Adam::new(AdamConfig::new(config.lr), &[l * d, l, d * l, d]);
    let mut since_fired = vec![0usize; l];
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = f64::NAN;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(Axis(0), chunk);
            let dead: Vec<bool> = since_fired
                .iter()
                .map(|&s| s >= config.dead_window_steps)
                .collect();
            let (fwd, grad) = forward_backward(&model, batch.view(), &dead)?;
            let loss = fwd.loss;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite SAE loss at epoch {epoch}, step {step}"
                )));
            }
            opt.begin_step();
            update(&mut opt, 0, &mut model.w_enc, &grad.w_enc);
            update1(&mut opt, 1, &mut model.b_enc, &grad.b_enc);
            update(&mut opt, 2, &mut model.w_dec, &grad.w_dec);
            update1(&mut opt, 3, &mut model.b_dec, &grad.b_dec);

            for (j, col) in fwd.z.columns().into_iter().enumerate() {
                if col.iter().any(|&v| v > 0.0) {
                    since_fired[j] = 0;
                } else {
                    since_fired[j] += 1;
                }
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        epoch_loss = loss_sum / batches as f64;
        log::debug!("sae epoch {epoch}: loss {epoch_loss:.6}");
    }

    for v in model
        .w_enc
        .iter_mut()
        .chain(model.b_enc.iter_mut())
        .chain(model.w_dec.iter_mut())
        .chain(model.b_dec.iter_mut())
    {
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite SAE parameter after training".into()));
        }
        *v = quantize_f32(*v);
    }
    model.diagnostics = SaeDiagnostics {
        r2: r2(&model, features)?,
        dead_rate: dead_rate(&model, features)?,
        final_loss: epoch_loss,
    };
    Ok(model)
}

fn update(opt: &mut Adam, slot: usize, param: &mut Array2<f64>, grad: &Array2<f64>) {
    let g = grad.as_standard_layout();
    opt.update(
        slot,
        param.as_slice_mut().expect("standard layout"),
        g.as_slice().expect("standard layout"),
        false,
    );
}

fn update1(opt: &mut Adam, slot: usize, param: &mut Array1<f64>, grad: &Array1<f64>) {
    opt.update(
        slot,
        param.as_slice_mut().expect("contiguous"),
        grad.as_slice().expect("contiguous"),
        false,
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_model(w_enc: Array2<f64>, k: usize) -> SaeModel {
        let (l, d) = w_enc.dim();
        let mut config = SaeConfig::new(d);
        config.expansion = l as f64 / d as f64;
        config.k = k;
        SaeModel {
            w_dec: w_enc.t().to_owned(),
            w_enc,
            b_enc: Array1::zeros(l),
            b_dec: Array1::zeros(d),
            config,
            diagnostics: SaeDiagnostics {
                r2: 0.0,
                dead_rate: 0.0,
                final_loss: 0.0,
            },
        }
    }

    #[test]
    fn zero_weights_give_zero_latents() {
        let m = tiny_model(Array2::zeros((4, 2)), 4);
        let z = m
            .encode_array(array![[1.0, -2.0], [3.0, 4.0]].view(), EncodeMode::Inference)
            .unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_sample_topk_keeps_largest() {
        // Identity encoder on a 4-d input reproduces p directly.
        let m = tiny_model(Array2::eye(4), 2);
        let z = m
            .encode_array(array![[3.0, 1.0, 2.0, 0.5]].view(), EncodeMode::Inference)
            .unwrap();
        assert_eq!(z, array![[3.0, 0.0, 2.0, 0.0]]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(
            {
                let mut v = top_indices(&[1.0, 2.0, 2.0, 2.0], 2);
                v.sort();
                v
            },
            vec![1, 2]
        );
    }

    #[test]
    fn decode_of_zero_is_bias() {
        let mut m = tiny_model(Array2::eye(3), 1);
        m.b_dec = array![1.0, -1.0, 0.5];
        let h = m.decode_array(Array2::zeros((2, 3)).view()).unwrap();
        assert_eq!(h, array![[1.0, -1.0, 0.5], [1.0, -1.0, 0.5]]);
    }

    #[test]
    fn decode_of_basis_vector_is_column() {
        let mut m = tiny_model(Array2::zeros((3, 2)), 1);
        m.w_dec = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let h = m.decode_array(array![[0.0, 1.0, 0.0]].view()).unwrap();
        assert_eq!(h, array![[2.0, 5.0]]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = tiny_model(Array2::eye(3), 1);
        assert!(matches!(
            m.encode_array(Array2::zeros((1, 2)).view(), EncodeMode::Inference),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(m.decode_array(Array2::zeros((1, 4)).view()).is_err());
    }

    #[test]
    fn r2_examples() {
        let h = array![[0.0], [2.0]];
        assert_eq!(r2_score(h.view(), h.view()).unwrap(), 1.0);
        assert_eq!(r2_score(h.view(), array![[1.0], [1.0]].view()).unwrap(), 0.0);
        assert!(r2_score(array![[1.0], [1.0]].view(), h.view()).is_err());
    }

    #[test]
    fn perfect_reconstruction_has_zero_decoder_gradient() {
        // One-hot inputs through an identity SAE reconstruct exactly.
        let mut m = tiny_model(Array2::eye(3), 1);
        m.config.dead_loss_weight = 0.0;
        let x = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let (loss, g) = sae_loss_gradient(&m, x.view(), &[false; 3]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.w_dec.iter().all(|&v| v == 0.0));
        assert!(g.b_dec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aux_term_vanishes_without_dead_latents() {
        let mut m = tiny_model(array![[1.0, 0.2], [0.3, 1.0], [-0.5, 0.4]], 1);
        let x = array![[0.7, -0.1], [0.2, 0.9]];
        m.config.dead_loss_weight = 0.0;
        let (l0, g0) = sae_loss_gradient(&m, x.view(), &[false; 3]).unwrap();
        m.config.dead_loss_weight = 0.5;
        let (l1, g1) = sae_loss_gradient(&m, x.view(), &[false; 3]).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn config_validation() {
        let mut c = SaeConfig::new(4);
        assert_eq!(c.latent_dim(), 8);
        c.k = 9;
        assert!(c.validate().is_err());
        c.k = 2;
        c.aux_k = Some(12);
        assert!(c.validate().is_err());
    }
}
