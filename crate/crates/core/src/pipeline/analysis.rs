use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Zip;

use crate::concept_space::{
    ablate_array, active_concepts, binarize, compute_anchor_stats, top_activating,
    ActiveConceptSet, AnchorStats,
};
use crate::error::{Error, Result};
use crate::feature_store::{align_pair, load_from_layout, FeatureKey, FeatureMatrix, Split};
use crate::metrics::{metrics_bundle, outcome_from_report, ActivationTriple, MetricsBundle};
use crate::monosemanticity::{permutation_baseline, scorable_neurons};
use crate::probe::{
    concept_decodability, evaluate, fit_probe, ConceptProbeResult, DecodabilityReport,
    Distribution, ProbeModel, ProbePanel,
};
use crate::sae::{encode, train_sae, EncodeMode, LatentMatrix, SaeModel, Variant};
use crate::translator::{
    self, fit_linear, fit_linear_closed_form, fit_nonlinear, mse, LinearTranslator,
};

use super::config::{RunConfig, SaeSettings, TranslatorMethod};
use super::report::{
    AblationCheck, ActiveSets, AnalysisReport, AnchorSummary, PairReport, PanelPair, SaeSummary,
    TaskReport, Timing, TopActivating, TranslatorSummary, REPORT_SCHEMA_VERSION,
};

/// Where feature matrices come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    Layout(PathBuf),
    Memory(BTreeMap<FeatureKey, FeatureMatrix>),
}

impl FeatureSource {
    pub fn memory(matrices: impl IntoIterator<Item = FeatureMatrix>) -> Self {
        FeatureSource::Memory(matrices.into_iter().map(|m| (m.key(), m)).collect())
    }

    pub fn load(&self, key: FeatureKey) -> Result<FeatureMatrix> {
        match self {
            FeatureSource::Layout(root) => load_from_layout(root, key),
            FeatureSource::Memory(map) => map.get(&key).cloned().ok_or_else(|| {
                Error::MissingFile(PathBuf::from(format!(
                    "task{}/ckpt{}/{}",
                    key.task_id, key.checkpoint_id, key.split
                )))
            }),
        }
    }
}

fn key(task: u32, checkpoint: u32, split: Split) -> FeatureKey {
    FeatureKey {
        task_id: task,
        checkpoint_id: checkpoint,
        split,
    }
}

/// Everything about one later checkpoint that does not depend on tau.
pub struct PairState {
    pub checkpoint: u32,
    pub later_train: FeatureMatrix,
    pub later_test: FeatureMatrix,
    pub translator: LinearTranslator,
    pub translated_test: FeatureMatrix,
    pub z_ts: LatentMatrix,
    pub z_tt: LatentMatrix,
    pub translator_summary: TranslatorSummary,
    pub nonlinear_summary: Option<TranslatorSummary>,
}

/// Everything about one task that does not depend on tau.
pub struct TaskState {
    pub task: u32,
    pub sae: SaeModel,
    pub anchor_train: FeatureMatrix,
    pub anchor_test: FeatureMatrix,
    pub z_train: LatentMatrix,
    pub z_test: LatentMatrix,
    pub stats: AnchorStats,
    pub pairs: Vec<PairState>,
}

/// Trains the task's SAE and translators and encodes every variant.
pub fn prepare_task(
    config: &RunConfig,
    source: &FeatureSource,
    task: u32,
    checkpoints: &[u32],
    sae_settings: &SaeSettings,
    seed: u64,
) -> Result<TaskState> {
    let anchor_train = source.load(key(task, 0, Split::Train))?;
    let anchor_test = source.load(key(task, 0, Split::Test))?;
    if anchor_train.dim() != anchor_test.dim() {
        return Err(Error::DimensionMismatch {
            what: "anchor test features",
            expected: anchor_train.dim(),
            actual: anchor_test.dim(),
        });
    }
    let sae = train_sae(&anchor_train, &sae_settings.to_config(anchor_train.dim(), seed))?;
    if !(sae.diagnostics.r2 >= config.min_sae_r2) {
        return Err(Error::Numerical(format!(
            "task {task}: SAE reconstruction R² {:.4} below the acceptance bar {}",
            sae.diagnostics.r2, config.min_sae_r2
        )));
    }
    let z_train = encode(&sae, &anchor_train, EncodeMode::Inference, Variant::Anchor)?;
    let z_test = encode(&sae, &anchor_test, EncodeMode::Inference, Variant::Anchor)?;
    let stats = compute_anchor_stats(&z_train)?;

    let mut pairs = Vec::with_capacity(checkpoints.len());
    for &s in checkpoints {
        let later_train = source.load(key(task, s, Split::Train))?;
        let later_test = source.load(key(task, s, Split::Test))?;
        let fit_view = align_pair(&later_train, &anchor_train)?;
        align_pair(&later_test, &anchor_test)?;

        let settings = &config.translator;
        let tcfg = settings.to_config(seed);
        let translator = match settings.method {
            TranslatorMethod::Gradient => fit_linear(&fit_view, &tcfg)?,
            TranslatorMethod::ClosedForm => {
                fit_linear_closed_form(&fit_view, settings.ridge_lambda)?
            }
        };
        let translated_test = translator::apply(&translator, &later_test)?;
        let anchor_test_f64 = anchor_test.to_f64();
        let translator_summary = TranslatorSummary {
            method: settings.method,
            train_mse: translator.train_mse,
            val_mse: translator.val_mse,
            test_mse: mse(translated_test.to_f64().view(), anchor_test_f64.view()),
        };
        let nonlinear_summary = if settings.nonlinear_baseline {
            let nl = fit_nonlinear(&fit_view, &tcfg)?;
            let out = nl.apply_array(later_test.to_f64().view())?;
            Some(TranslatorSummary {
                method: settings.method,
                train_mse: nl.train_mse,
                val_mse: nl.val_mse,
                test_mse: mse(out.view(), anchor_test_f64.view()),
            })
        } else {
            None
        };

        let z_ts = encode(&sae, &later_test, EncodeMode::Inference, Variant::RawAfter)?;
        let z_tt = encode(&sae, &translated_test, EncodeMode::Inference, Variant::Translated)?;
        pairs.push(PairState {
            checkpoint: s,
            later_train,
            later_test,
            translator,
            translated_test,
            z_ts,
            z_tt,
            translator_summary,
            nonlinear_summary,
        });
    }
    Ok(TaskState {
        task,
        sae,
        anchor_train,
        anchor_test,
        z_train,
        z_test,
        stats,
        pairs,
    })
}

fn active(z: &LatentMatrix, stats: &AnchorStats, tau: f64) -> Result<ActiveConceptSet> {
    active_concepts(&binarize(z, stats)?, tau)
}

/// Test-split active sets for one pair at one tau.
pub fn active_sets(task: &TaskState, pair: &PairState, tau: f64) -> Result<ActiveSets> {
    Ok(ActiveSets {
        anchor: active(&task.z_test, &task.stats, tau)?,
        raw_after: active(&pair.z_ts, &task.stats, tau)?,
        translated: active(&pair.z_tt, &task.stats, tau)?,
    })
}

/// Concept probes are independent of tau, so results are cached per concept.
pub type ProbeCache = BTreeMap<usize, ConceptProbeResult>;

fn decodability(
    config: &RunConfig,
    task: &TaskState,
    pair: &PairState,
    concepts: &[usize],
    cache: &mut ProbeCache,
) -> Result<DecodabilityReport> {
    let missing: Vec<usize> = concepts
        .iter()
        .copied()
        .filter(|k| !cache.contains_key(k))
        .collect();
    if !missing.is_empty() {
        let fresh = concept_decodability(
            &missing,
            &task.z_test,
            pair.later_test.to_f64().view(),
            pair.later_train.to_f64().view(),
            &task.z_train,
            &config.concept_probe,
        )?;
        for r in fresh.concepts {
            cache.insert(r.concept, r);
        }
    }
    let results: Vec<ConceptProbeResult> = concepts.iter().map(|k| cache[k].clone()).collect();
    let scored: Vec<_> = results.iter().filter_map(|r| r.scores).collect();
    let ba: Vec<f64> = scored.iter().map(|s| s.balanced_accuracy).collect();
    let f1: Vec<f64> = scored.iter().filter_map(|s| s.f1).collect();
    Ok(DecodabilityReport {
        concepts: results,
        balanced_accuracy: Distribution::of(&ba),
        f1: Distribution::of(&f1),
    })
}

/// Active sets, decodability probes and the metrics bundle at one tau.
pub fn evaluate_pair(
    config: &RunConfig,
    task: &TaskState,
    pair: &PairState,
    tau: f64,
    cache: &mut ProbeCache,
) -> Result<(ActiveSets, MetricsBundle, DecodabilityReport)> {
    let sets = active_sets(task, pair, tau)?;
    let to_probe: Vec<usize> = sets
        .anchor
        .indices
        .iter()
        .copied()
        .filter(|&k| {
            !sets.raw_after.contains(k)
                && (config.probe_all_deleted || !sets.translated.contains(k))
        })
        .collect();
    let report = decodability(config, task, pair, &to_probe, cache)?;
    let triple = ActivationTriple::new(&task.z_test, &pair.z_ts, &pair.z_tt)?;
    let bundle = metrics_bundle(
        &sets.anchor,
        &sets.raw_after,
        &sets.translated,
        &triple,
        |k| outcome_from_report(&report, k),
    )?;
    Ok((sets, bundle, report))
}

fn panel(model: &ProbeModel, xs: [&ndarray::Array2<f64>; 3], y: &[u32]) -> Result<ProbePanel> {
    let acc = |x: &ndarray::Array2<f64>| evaluate(model, x.view(), y).map(|s| s.accuracy);
    Ok(ProbePanel {
        at_t: acc(xs[0])?,
        raw_after: acc(xs[1])?,
        translated: acc(xs[2])?,
        converged: model.converged,
    })
}

fn analyze_task(config: &RunConfig, source: &FeatureSource, task: u32, ckpts: &[u32]) -> Result<TaskReport> {
    let state = prepare_task(config, source, task, ckpts, &config.sae, config.seed)?;
    let train_x = state.anchor_train.to_f64();
    let test_x = state.anchor_test.to_f64();
    let train_y = state.anchor_train.require_labels()?;
    let test_y = state.anchor_test.require_labels()?;
    let n_classes = state.anchor_train.label_count() as usize;
    let mut task_probe = config.task_probe;
    task_probe.seed = config.seed;
    let feature_probe = fit_probe(train_x.view(), train_y, n_classes, &task_probe)?;
    let latent_probe = fit_probe(state.z_train.data.view(), train_y, n_classes, &task_probe)?;

    let active_train = active(&state.z_train, &state.stats, config.tau)?;

    let monosemanticity = if config.monosemanticity {
        let neurons = scorable_neurons(state.z_train.data.view(), &active_train.indices);
        Some(permutation_baseline(
            state.z_train.data.view(),
            train_x.view(),
            &neurons,
            config.seed,
        )?)
    } else {
        None
    };

    let ablation = if config.ablation {
        let ablated = ablate_array(test_x.view(), &state.sae, &active_train)?;
        let max_abs_change = Zip::from(&ablated)
            .and(&test_x)
            .fold(0.0f64, |m, &a, &b| m.max((a - b).abs()));
        Some(AblationCheck {
            tau: config.tau,
            active_count: active_train.len(),
            accuracy_full: evaluate(&feature_probe, test_x.view(), test_y)?.accuracy,
            accuracy_ablated: evaluate(&feature_probe, ablated.view(), test_y)?.accuracy,
            max_abs_change,
        })
    } else {
        None
    };

    let m = config.top_m.min(state.z_train.n_samples());
    let top = active_train
        .indices
        .iter()
        .map(|&k| {
            Ok(TopActivating {
                concept: k,
                samples: top_activating(&state.z_train, k, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pairs = Vec::with_capacity(state.pairs.len());
    for pair in &state.pairs {
        let mut cache = ProbeCache::new();
        let (sets, metrics, decod) = evaluate_pair(config, &state, pair, config.tau, &mut cache)?;
        let later_x = pair.later_test.to_f64();
        let translated_x = pair.translated_test.to_f64();
        let task_probes = PanelPair {
            features: panel(&feature_probe, [&test_x, &later_x, &translated_x], test_y)?,
            latents: panel(
                &latent_probe,
                [&state.z_test.data, &pair.z_ts.data, &pair.z_tt.data],
                test_y,
            )?,
        };
        pairs.push(PairReport {
            task_id: task,
            checkpoint_id: pair.checkpoint,
            active_sets: sets,
            metrics,
            translator: pair.translator_summary.clone(),
            nonlinear_translator: pair.nonlinear_summary.clone(),
            task_probes,
            decodability: decod,
        });
    }

    Ok(TaskReport {
        task_id: task,
        sae: SaeSummary {
            latent_dim: state.sae.latent_dim(),
            k: state.sae.config.k,
            diagnostics: state.sae.diagnostics,
        },
        anchor: AnchorSummary {
            fingerprint: state.stats.fingerprint,
            mu: state.stats.mu.to_vec(),
        },
        active_train,
        monosemanticity,
        ablation,
        top_activating: top,
        pairs,
    })
}

/// Runs the full analysis for every configured task pair.
pub fn run_analysis(config: &RunConfig, source: &FeatureSource) -> Result<AnalysisReport> {
    config.validate()?;
    let start = Instant::now();
    let mut tasks = Vec::new();
    let mut per_task_seconds = Vec::new();
    for (task, ckpts) in config.tasks() {
        let t0 = Instant::now();
        log::info!("analysing task {task} at checkpoints {ckpts:?}");
        tasks.push(analyze_task(config, source, task, &ckpts)?);
        per_task_seconds.push(t0.elapsed().as_secs_f64());
    }
    Ok(AnalysisReport {
        schema_version: REPORT_SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").to_owned(),
        seed: config.seed,
        config: config.clone(),
        tasks,
        timing: Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            per_task_seconds,
        },
    })
}
