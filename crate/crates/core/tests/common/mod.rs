#![allow(dead_code)]

use concept_forgetting::pipeline::analysis::FeatureSource;
use concept_forgetting::pipeline::RunConfig;
use concept_forgetting::sae::{SaeConfig, SaeGradient, SaeModel};
use concept_forgetting::synth::SynthData;
use ndarray::{Array1, Array2};

/// Every matrix of a generated task, keyed for the pipeline.
pub fn memory_source(data: &[&SynthData]) -> FeatureSource {
    let mut all = Vec::new();
    for d in data {
        all.push(d.anchor_train.clone());
        all.push(d.anchor_test.clone());
        for (tr, te) in &d.drifted {
            all.push(tr.clone());
            all.push(te.clone());
        }
    }
    FeatureSource::memory(all)
}

/// SAE settings used for the end-to-end synthetic runs: K=4 with a short
/// dead window and a full-weight auxiliary loss.
pub fn tuned_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.sae.k = 4;
    c.sae.dead_window_steps = 10;
    c.sae.dead_loss_weight = 1.0;
    c
}

pub fn tuned_sae_config(d: usize, seed: u64) -> SaeConfig {
    SaeConfig {
        k: 4,
        dead_window_steps: 10,
        dead_loss_weight: 1.0,
        seed,
        ..SaeConfig::new(d)
    }
}

pub fn sae_params(m: &SaeModel) -> Vec<f64> {
    m.w_enc
        .iter()
        .chain(m.b_enc.iter())
        .chain(m.w_dec.iter())
        .chain(m.b_dec.iter())
        .copied()
        .collect()
}

pub fn sae_grad_flat(g: &SaeGradient) -> Vec<f64> {
    g.w_enc
        .iter()
        .chain(g.b_enc.iter())
        .chain(g.w_dec.iter())
        .chain(g.b_dec.iter())
        .copied()
        .collect()
}

pub fn set_sae_params(m: &mut SaeModel, p: &[f64]) {
    let mut it = p.iter().copied();
    for v in m
        .w_enc
        .iter_mut()
        .chain(m.b_enc.iter_mut())
        .chain(m.w_dec.iter_mut())
        .chain(m.b_dec.iter_mut())
    {
        *v = it.next().unwrap();
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + eps;
            let up = f(&p);
            p[i] = x[i] - eps;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest entrywise deviation relative to the largest analytic entry.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

pub fn array(rows: usize, cols: usize, v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v.to_vec()).unwrap()
}

pub fn vector(v: &[f64]) -> Array1<f64> {
    Array1::from(v.to_vec())
}
