mod common;

use common::*;
use concept_forgetting::metrics::Category;
use concept_forgetting::pipeline::analysis::{evaluate_pair, prepare_task, ProbeCache};
use concept_forgetting::pipeline::{run_analysis, TranslatorMethod};
use concept_forgetting::probe::{evaluate, fit_probe, ProbeConfig};
use concept_forgetting::synth::{
    align_latents_to_atoms, generate, DriftKind, DriftSpec, SynthSpec, ALIGNMENT_THRESHOLD,
};

#[test]
fn identity_drift_deletes_nothing() {
    let data = generate(&SynthSpec::reference(DriftSpec::new(DriftKind::Identity), 0)).unwrap();
    let report = run_analysis(&tuned_config(0), &memory_source(&[&data])).unwrap();
    for p in report.pairs() {
        assert_eq!(p.metrics.deletion_ratio, Some(0.0));
        assert_eq!(p.metrics.counts.retained, p.metrics.active_count_t);
    }
}

#[test]
fn invertible_drifts_regain_and_never_lose() {
    for (drift, seed) in [
        (DriftSpec::new(DriftKind::Rotation), 0),
        (DriftSpec::affine([0.5, 2.0], 0.5), 1),
    ] {
        let data = generate(&SynthSpec::reference(drift.clone(), seed)).unwrap();
        let mut config = tuned_config(seed);
        config.probe_all_deleted = true;
        let report = run_analysis(&config, &memory_source(&[&data])).unwrap();
        let p = report.pairs().next().unwrap();
        let m = &p.metrics;
        assert!(m.regained_count_ratio.unwrap_or(1.0) >= 0.9, "{:?}: {m:?}", drift.kind);
        assert_eq!(m.counts.lost, 0, "{:?}", drift.kind);
    }
}

#[test]
fn planted_atoms_stay_decodable_under_invertible_drift() {
    let data = generate(&SynthSpec::reference(DriftSpec::new(DriftKind::Rotation), 0)).unwrap();
    let (train, test) = &data.drifted[0];
    let presence = |codes: &ndarray::Array2<f64>, j: usize| -> Vec<u32> {
        codes.column(j).iter().map(|&c| u32::from(c > 0.0)).collect()
    };
    for j in 0..data.spec.n_atoms {
        let y_train = presence(&data.truth.codes_train, j);
        let y_test = presence(&data.truth.codes_test, j);
        let model = fit_probe(train.to_f64().view(), &y_train, 2, &ProbeConfig::concept()).unwrap();
        let f1 = evaluate(&model, test.to_f64().view(), &y_test).unwrap().f1.unwrap();
        assert!(f1 >= 0.9, "atom {j}: F1 {f1}");
    }
}

#[test]
fn erasing_four_of_thirty_two_atoms_leaves_an_unrecovered_concept() {
    let mut spec = SynthSpec::reference(DriftSpec::erasure(vec![0, 1, 2, 3], false), 0);
    spec.d = 32;
    spec.n_atoms = 32;
    let data = generate(&spec).unwrap();
    let mut config = tuned_config(0);
    config.sae.k = 3;
    config.probe_all_deleted = true;
    let source = memory_source(&[&data]);
    let state = prepare_task(&config, &source, 0, &[1], &config.sae, 0).unwrap();
    let (_, bundle, _) =
        evaluate_pair(&config, &state, &state.pairs[0], config.tau, &mut ProbeCache::new()).unwrap();
    let align = align_latents_to_atoms(
        state.sae.w_dec.view(),
        data.truth.dictionary.view(),
        ALIGNMENT_THRESHOLD,
    );
    let unrecovered = bundle
        .taxonomy
        .iter()
        .filter(|r| align[r.concept].is_some_and(|a| a < 4))
        .filter(|r| matches!(r.category, Category::Decodable | Category::Lost))
        .count();
    assert!(unrecovered >= 1, "{:?}", bundle.taxonomy);
}

#[test]
fn closed_form_pipeline_matches_gradient_on_deletion() {
    let data = generate(&SynthSpec::reference(DriftSpec::new(DriftKind::Rotation), 3)).unwrap();
    let source = memory_source(&[&data]);
    let grad = run_analysis(&tuned_config(3), &source).unwrap();
    let mut config = tuned_config(3);
    config.translator.method = TranslatorMethod::ClosedForm;
    let closed = run_analysis(&config, &source).unwrap();
    let (g, c) = (grad.pairs().next().unwrap(), closed.pairs().next().unwrap());
    // Deletion does not involve the translator at all.
    assert_eq!(g.metrics.deletion_ratio, c.metrics.deletion_ratio);
    assert!(c.translator.test_mse <= g.translator.test_mse * 1.05 + 1e-9);
}
