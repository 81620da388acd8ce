mod common;

use dixray::adapters::{make_reference_model, reference_convnet, ModelHandle, ReferenceKind};
use dixray::attribution::MethodPreset;
use dixray::sanity::{
    accuracy, data_randomization, randomization_sweep, spearman_values, synthetic_dataset, train_convnet,
    DataRandomizationConfig, RandomizationMode, TrainConfig,
};
use dixray::Tensor;
use proptest::prelude::*;

fn pinned_fixtures() -> Vec<Tensor> {
    synthetic_dataset(0, 16, 11).test.into_iter().map(|(x, _)| x).collect()
}

fn sweep(model: &ModelHandle, mode: RandomizationMode) -> dixray::sanity::RandomizationSweep {
    let method = MethodPreset::Dix2.config().resolve(model).unwrap();
    randomization_sweep(model, &method, &pinned_fixtures(), mode, 7).unwrap()
}

#[test]
fn cascading_sweep_starts_at_one_and_decorrelates() {
    let m = make_reference_model(ReferenceKind::TinyCnn, 42).unwrap();
    let s = sweep(&m, RandomizationMode::Cascading);
    assert_eq!(s.correlations.len(), m.randomizable_layers().len() + 1);
    assert_eq!(s.correlations[0], 1.0);
    assert_eq!(s.layers[0], "none");
    assert!(s.correlations[1] < 1.0, "{:?}", s.correlations);
    assert!(*s.correlations.last().unwrap() <= 0.5, "{:?}", s.correlations);
    assert!(s.skipped.is_empty());
}

#[test]
fn independent_sweep_changes_every_depth() {
    let m = make_reference_model(ReferenceKind::TinyCnn, 42).unwrap();
    let s = sweep(&m, RandomizationMode::Independent);
    assert_eq!(s.correlations[0], 1.0);
    for (d, c) in s.correlations.iter().enumerate().skip(1) {
        assert!(*c < 1.0 - 1e-6, "depth {d}: {c}");
    }
}

#[test]
fn sweeps_are_reproducible() {
    dixray::set_deterministic(true);
    let m = make_reference_model(ReferenceKind::TinyCnn, 42).unwrap();
    for mode in [RandomizationMode::Cascading, RandomizationMode::Independent] {
        assert_eq!(sweep(&m, mode), sweep(&m, mode));
    }
    assert_eq!(m.weight_state(), make_reference_model(ReferenceKind::TinyCnn, 42).unwrap().weight_state());
}

#[test]
fn sweep_rejects_models_without_groups() {
    let m = make_reference_model(ReferenceKind::Linear, 1).unwrap();
    let method = MethodPreset::Ig.config().resolve(&m).unwrap();
    assert!(randomization_sweep(&m, &method, &pinned_fixtures(), RandomizationMode::Cascading, 1).is_err());
}

#[test]
fn tiny_classifier_trains_past_target() {
    let data = synthetic_dataset(300, 300, 3);
    let mut net = reference_convnet(ReferenceKind::TinyClassifier10, 3).unwrap();
    let out = train_convnet(&mut net, &data.train, &TrainConfig::default(), 3, "true-label model").unwrap();
    assert!(out.train_accuracy > 0.95);
    assert!(accuracy(&net, &data.test) > 0.9);
}

#[test]
fn small_data_randomization_behaves() {
    let data = synthetic_dataset(200, 300, 21);
    let method = MethodPreset::Dix2.config();
    let cfg = DataRandomizationConfig { fixtures: 20, ..Default::default() };
    let r = data_randomization(ReferenceKind::TinyClassifier10, &data, &method, 21, &cfg).unwrap();
    assert!(r.true_training.train_accuracy > 0.95);
    assert!(r.permuted_training.train_accuracy > 0.95);
    assert!(r.within_chance, "permuted test accuracy {}", r.permuted_test_accuracy);
    assert!(r.permuted.mean < r.reseeded.mean, "{} vs {}", r.permuted.mean, r.reseeded.mean);
}

proptest! {
    #[test]
    fn spearman_is_bounded_symmetric_and_rank_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 2..40),
        seed in any::<u64>(),
    ) {
        let b = common::uniform(&[a.len()], seed).into_data();
        let ab = spearman_values(&a, &b).unwrap().value;
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - spearman_values(&b, &a).unwrap().value).abs() <= 1e-12);
        let monotone: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        prop_assert!((spearman_values(&monotone, &b).unwrap().value - ab).abs() <= 1e-12);
    }
}
