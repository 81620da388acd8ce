mod common;

use dixray::adapters::{make_reference_model, AnalyticModel, LayerId, ModelHandle, ReferenceKind, SiteKind};
use dixray::attribution::{
    aggregate, dix_layer_map_cnn, dix_layer_map_vit, explain, integrated_gradients, vit_step_grids, Aggregation,
    BaselineSpec, ExplanationMap, Grid, IntegrandSpec, LayerSelection, MethodPreset, PathSpec,
};
use dixray::Tensor;
use proptest::prelude::*;

/// Below this both errors are rounding noise (e.g. sites followed by a linear head).
const ROUNDOFF: f64 = 1e-12;

fn activation_sites(m: &ModelHandle) -> Vec<LayerId> {
    m.layer_ids().into_iter().filter(|l| l.site == SiteKind::Activation).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn completeness_converges_on_convolutional_models() {
    for kind in [ReferenceKind::TinyCnn, ReferenceKind::TinyClassifier10, ReferenceKind::Linear] {
        let mut m = make_reference_model(kind, 42).unwrap();
        let mut sites: Vec<(LayerId, BaselineSpec)> = vec![(LayerId::INPUT, BaselineSpec::Zero)];
        sites.extend(activation_sites(&m).into_iter().map(|l| (l, BaselineSpec::ChannelMin)));
        for seed in 0..3 {
            let input = common::uniform(&m.input_shape(), 100 + seed);
            let class = m.forward(&input).unwrap().top_class();
            for (layer, baseline) in &sites {
                let fine = common::completeness_error(&mut m, &input, class, *layer, 1024, baseline);
                let coarse = common::completeness_error(&mut m, &input, class, *layer, 16, baseline);
                assert!(fine <= 0.01, "{kind} {layer}: {fine}");
                assert!(fine <= coarse.max(ROUNDOFF), "{kind} {layer}: {fine} > {coarse}");
            }
        }
    }
}

#[test]
fn linear_model_integrated_gradients_is_exact() {
    let shape = [3, 4, 5];
    let n: usize = shape.iter().product();
    let weights: Vec<Vec<f64>> = (0..3).map(|k| common::normal_ish(&[n], 40 + k).into_data()).collect();
    let mut m = ModelHandle::new("linear", Box::new(AnalyticModel::linear(weights.clone(), &shape).unwrap())).unwrap();
    let x = common::uniform(&shape, 1);
    let custom = common::normal_ish(&shape, 2);
    for (baseline, z) in [(BaselineSpec::Zero, Tensor::zeros(&shape)), (BaselineSpec::Custom(custom.clone()), custom)] {
        for steps in [1, 3, 10, 37] {
            for (k, w) in weights.iter().enumerate() {
                let map = integrated_gradients(&mut m, &x, k, &PathSpec::with_steps(steps), &baseline).unwrap();
                assert!(max_abs_diff(map.values(), &common::linear_ig_oracle(w, &x, &z)) <= 1e-10);
            }
        }
    }
}

#[test]
fn input_site_dix_equals_integrated_gradients() {
    let mut m = make_reference_model(ReferenceKind::TinyCnn, 42).unwrap();
    let path = PathSpec::default();
    for seed in 0..20 {
        let input = common::uniform(&[3, 8, 8], 500 + seed);
        let class = (seed % 5) as usize;
        let a = dix_layer_map_cnn(&mut m, &input, class, LayerId::INPUT, &path, &BaselineSpec::Zero, &IntegrandSpec::GradientOnly).unwrap();
        let b = integrated_gradients(&mut m, &input, class, &path, &BaselineSpec::Zero).unwrap();
        assert!(max_abs_diff(a.values(), b.values()) <= 1e-10);
    }
}

#[test]
fn null_path_gives_zero_maps() {
    let mut m = make_reference_model(ReferenceKind::TinyCnn, 42).unwrap();
    let input = common::uniform(&[3, 8, 8], 3);
    let layers = m.layer_ids();
    let (_, captured) = m.forward_capture(&input, &layers).unwrap();
    for l in layers {
        let x = if l.site == SiteKind::Input { input.clone() } else { captured[&l].clone() };
        let integrands: &[IntegrandSpec] = if l.site == SiteKind::Input {
            &[IntegrandSpec::GradientOnly]
        } else {
            &[IntegrandSpec::GradientOnly, IntegrandSpec::ActivationTimesGradient]
        };
        for phi in integrands {
            let map = dix_layer_map_cnn(&mut m, &input, 1, l, &PathSpec::default(), &BaselineSpec::Custom(x.clone()), phi).unwrap();
            assert!(map.values().iter().all(|v| *v == 0.0), "{l} {phi:?}");
        }
    }
}

#[test]
fn every_layer_map_has_input_dims() {
    for kind in ReferenceKind::ALL {
        let mut m = make_reference_model(kind, 1).unwrap();
        let input = common::uniform(&m.input_shape(), 8);
        for l in m.layer_ids().into_iter().skip(1) {
            let map = match l.site {
                SiteKind::Attention => dix_layer_map_vit(&mut m, &input, 0, l, &PathSpec::default(), &IntegrandSpec::gradient_rollout()),
                _ => dix_layer_map_cnn(&mut m, &input, 0, l, &PathSpec::default(), &BaselineSpec::ChannelMin, &IntegrandSpec::ActivationTimesGradient),
            }
            .unwrap();
            assert_eq!(map.dims(), (8, 8), "{kind} {l}");
        }
    }
}

#[test]
fn vit_layer_maps_match_matrix_oracle() {
    let mut m = make_reference_model(ReferenceKind::TinyVit, 7).unwrap();
    let input = common::uniform(&[3, 8, 8], 21);
    let class = m.forward(&input).unwrap().top_class();
    let path = PathSpec::with_steps(4);
    for block in m.layer_ids().into_iter().filter(|l| l.site == SiteKind::Attention) {
        let grids = vit_step_grids(&mut m, &input, class, block, &path, &IntegrandSpec::gradient_rollout()).unwrap();
        let (_, captured) = m.forward_capture(&input, &[block]).unwrap();
        for (n, grid) in grids.iter().enumerate() {
            let rep = captured[&block].scale((n + 1) as f64 / 4.0);
            let pass = m.attention_pass(block, &rep, class).unwrap();
            let oracle = common::gradient_rollout_oracle(&pass.attentions, &pass.gradients);
            assert!(max_abs_diff(&grid.values, &oracle) <= 1e-10, "{block} step {}", n + 1);
        }
        let map = dix_layer_map_vit(&mut m, &input, class, block, &path, &IntegrandSpec::gradient_rollout()).unwrap();
        let oracle = common::vit_layer_map_oracle(&mut m, &input, class, block, 4);
        assert!(max_abs_diff(map.values(), &oracle) <= 1e-10, "{block}");
    }
}

#[test]
fn presets_compose_their_layer_maps() {
    let mut m = make_reference_model(ReferenceKind::TinyCnn, 42).unwrap();
    let input = common::uniform(&[3, 8, 8], 77);
    let class = m.forward(&input).unwrap().top_class();
    let l = m.last_layer();
    let path = PathSpec::default();
    let layer = |m: &mut ModelHandle, i: usize, phi: IntegrandSpec| {
        let id = m.layer(i).unwrap();
        dix_layer_map_cnn(m, &input, class, id, &path, &BaselineSpec::ChannelMin, &phi).unwrap().grid.values
    };
    let atg = IntegrandSpec::ActivationTimesGradient;
    let (a, b, c) = (layer(&mut m, l - 2, atg), layer(&mut m, l - 1, atg), layer(&mut m, l, atg));
    let (ga, gb, gc) = (
        layer(&mut m, l - 2, IntegrandSpec::GradientOnly),
        layer(&mut m, l - 1, IntegrandSpec::GradientOnly),
        layer(&mut m, l, IntegrandSpec::GradientOnly),
    );
    let mean = |ms: &[&Vec<f64>]| -> Vec<f64> {
        (0..ms[0].len()).map(|i| ms.iter().map(|m| m[i]).sum::<f64>() / ms.len() as f64).collect()
    };
    let expected: Vec<(MethodPreset, Vec<f64>)> = vec![
        (MethodPreset::Dix1, c.clone()),
        (MethodPreset::Dix2, mean(&[&b, &c])),
        (MethodPreset::Dix3, mean(&[&a, &b, &c])),
        (MethodPreset::Dix2Mul, b.iter().zip(&c).map(|(x, y)| x * y).collect()),
        (MethodPreset::Dix3Grads, mean(&[&ga, &gb, &gc])),
        (
            MethodPreset::Ig,
            integrated_gradients(&mut m, &input, class, &path, &BaselineSpec::Zero).unwrap().grid.values,
        ),
    ];
    for (preset, want) in expected {
        let resolved = preset.config().resolve(&m).unwrap();
        let got = explain(&mut m, &input, None, &resolved).unwrap();
        assert!(max_abs_diff(got.values(), &want) <= 1e-12, "{}", preset.as_str());
        assert_eq!(got.class_index, class);
    }
}

#[test]
fn explain_is_deterministic() {
    dixray::set_deterministic(true);
    for kind in ReferenceKind::ALL {
        let run = || {
            let mut m = make_reference_model(kind, 5).unwrap();
            let input = common::uniform(&m.input_shape(), 6);
            let r = MethodPreset::Dix1.config().resolve(&m).unwrap();
            explain(&mut m, &input, None, &r).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "{kind}");
        assert_eq!(a.provenance_digest(), b.provenance_digest());
    }
}

fn grid_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, len)
}

fn as_map(v: Vec<f64>) -> ExplanationMap {
    ExplanationMap::from_grid(Grid::new(2, 3, v).unwrap(), 0)
}

fn selection(n: usize, aggregation: Aggregation) -> LayerSelection {
    LayerSelection {
        layers: (1..=n).map(|i| LayerId::new(i, SiteKind::Activation)).collect(),
        aggregation,
    }
}

proptest! {
    #[test]
    fn mean_aggregation_is_permutation_invariant(a in grid_strategy(6), b in grid_strategy(6), c in grid_strategy(6)) {
        let sel = selection(3, Aggregation::Mean);
        let x = aggregate(&[as_map(a.clone()), as_map(b.clone()), as_map(c.clone())], &sel).unwrap();
        let y = aggregate(&[as_map(c), as_map(a), as_map(b)], &sel).unwrap();
        prop_assert!(max_abs_diff(x.values(), y.values()) <= 1e-12);
    }

    #[test]
    fn mean_of_identical_maps_is_the_map(a in grid_strategy(6), n in 1usize..5) {
        let maps = vec![as_map(a.clone()); n];
        let out = aggregate(&maps, &selection(n, Aggregation::Mean)).unwrap();
        prop_assert!(max_abs_diff(out.values(), &a) <= 1e-12);
    }

    #[test]
    fn singleton_aggregation_is_identity(a in grid_strategy(6)) {
        for agg in [Aggregation::Mean, Aggregation::ElementwiseProduct] {
            let out = aggregate(&[as_map(a.clone())], &selection(1, agg)).unwrap();
            prop_assert_eq!(out.values(), a.as_slice());
        }
    }
}
