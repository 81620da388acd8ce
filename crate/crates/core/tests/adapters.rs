mod common;

use dixray::adapters::{
    make_reference_model, reference_convnet, ConvNet, HeadPool, LayerId, ReferenceKind, SiteKind,
};
use dixray::Tensor;

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Zero-padded 3x3 convolution written as a gather over output pixels.
fn conv(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y + ky, xx + kx);
                            if sy == 0 || sx == 0 || sy > h || sx > w {
                                continue;
                            }
                            acc += weight[((o * cin + i) * 3 + ky) * 3 + kx] * x[(i * h + sy - 1) * w + sx - 1];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy: usize, dx: usize| x[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
    }
    out
}

fn dense(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + x.iter().enumerate().map(|(i, v)| weight[o * x.len() + i] * v).sum::<f64>())
        .collect()
}

/// Straight-line re-evaluation of a convnet from its public weights.
fn reevaluate(net: &ConvNet, input: &Tensor) -> Vec<f64> {
    let [c0, mut h, mut w] = net.input_shape;
    let mut c = net.stem.cout;
    let mut x: Vec<f64> = conv(input.data(), c0, h, w, &net.stem.weight, &net.stem.bias).into_iter().map(silu).collect();
    for b in &net.blocks {
        let a: Vec<f64> = conv(&x, c, h, w, &b.conv1.weight, &b.conv1.bias).into_iter().map(silu).collect();
        let pre = conv(&a, c, h, w, &b.conv2.weight, &b.conv2.bias);
        x = pre.iter().zip(&x).map(|(p, r)| silu(p + r)).collect();
        c = b.conv2.cout;
        if b.pool {
            x = pool2(&x, c, h, w);
            h /= 2;
            w /= 2;
        }
    }
    let features = match net.head_pool {
        HeadPool::Global => (0..c).map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect(),
        HeadPool::Pool2Flatten => pool2(&x, c, h, w),
    };
    let head_in = match &net.hidden {
        Some(d) => dense(&features, &d.weight, &d.bias).into_iter().map(silu).collect(),
        None => features,
    };
    dense(&head_in, &net.out.weight, &net.out.bias)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn tiny_cnn_matches_straight_line_reevaluation() {
    let net = reference_convnet(ReferenceKind::TinyCnn, 42).unwrap();
    let mut handle = make_reference_model(ReferenceKind::TinyCnn, 42).unwrap();
    let last = LayerId::new(handle.last_layer(), SiteKind::Activation);
    for input in [Tensor::zeros(&[3, 8, 8]), common::uniform(&[3, 8, 8], 5)] {
        let (pred, captured) = handle.forward_capture(&input, &[last]).unwrap();
        assert_eq!(captured[&last].shape(), handle.site_shape(last).unwrap().as_slice());
        assert!(close(&pred.scores, &reevaluate(&net, &input), 1e-12));
    }
}

#[test]
fn tiny_classifier_matches_straight_line_reevaluation() {
    let net = reference_convnet(ReferenceKind::TinyClassifier10, 3).unwrap();
    let mut handle = make_reference_model(ReferenceKind::TinyClassifier10, 3).unwrap();
    let input = common::uniform(&[3, 8, 8], 9);
    assert!(close(&handle.forward(&input).unwrap().scores, &reevaluate(&net, &input), 1e-12));
}

#[test]
fn zero_substitution_at_last_site_is_the_head_on_zeros() {
    let net = reference_convnet(ReferenceKind::TinyCnn, 42).unwrap();
    let mut handle = make_reference_model(ReferenceKind::TinyCnn, 42).unwrap();
    let last = LayerId::new(handle.last_layer(), SiteKind::Activation);
    let zeros = Tensor::zeros(&handle.site_shape(last).unwrap());
    let pred = handle.forward_from(last, &zeros).unwrap();
    let head = dense(&vec![0.0; net.out.inp], &net.out.weight, &net.out.bias);
    assert!(close(&pred.scores, &head, 1e-15));
}

#[test]
fn gradients_match_finite_differences_on_every_model() {
    for kind in ReferenceKind::ALL {
        let mut m = make_reference_model(kind, 42).unwrap();
        let err = common::fd_max_error(&mut m, 50, 1);
        assert!(err <= 1e-3, "{kind}: max relative error {err:e}");
    }
}

#[test]
fn composition_identity_is_bitwise_at_every_site() {
    dixray::set_deterministic(true);
    for kind in ReferenceKind::ALL {
        let mut m = make_reference_model(kind, 7).unwrap();
        let layers = m.layer_ids();
        let input = common::uniform(&m.input_shape(), 11);
        let (pred, captured) = m.forward_capture(&input, &layers).unwrap();
        for l in &layers {
            let rep = if l.site == SiteKind::Input { input.clone() } else { captured[l].clone() };
            assert_eq!(m.forward_from(*l, &rep).unwrap().scores, pred.scores, "{kind} {l}");
        }
    }
}

#[test]
fn captured_attention_rows_are_stochastic() {
    let mut m = make_reference_model(ReferenceKind::TinyVit, 7).unwrap();
    let att: Vec<LayerId> = m.layer_ids().into_iter().filter(|l| l.site == SiteKind::Attention).collect();
    assert_eq!(att.len(), 2);
    for seed in 0..5 {
        let (_, captured) = m.forward_capture(&common::uniform(&[3, 8, 8], seed), &att).unwrap();
        for l in &att {
            let a = &captured[l];
            assert_eq!(a.shape(), &[2, 5, 5]);
            for row in a.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

#[test]
fn same_kind_seed_input_gives_identical_captures_and_gradients() {
    dixray::set_deterministic(true);
    for kind in ReferenceKind::ALL {
        let run = || {
            let mut m = make_reference_model(kind, 3).unwrap();
            let layers = m.layer_ids();
            let input = common::uniform(&m.input_shape(), 4);
            let (_, captured) = m.forward_capture(&input, &layers).unwrap();
            let grads: Vec<Tensor> = layers
                .iter()
                .map(|l| {
                    let rep = if l.site == SiteKind::Input { input.clone() } else { captured[l].clone() };
                    m.grad_at(*l, &rep, 0).unwrap()
                })
                .collect();
            (captured, grads, m.weight_state())
        };
        assert_eq!(run(), run(), "{kind}");
    }
}
