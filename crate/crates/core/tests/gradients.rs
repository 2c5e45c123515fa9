mod common;

use std::collections::BTreeMap;

use common::*;
use drape::nn::{Network, PoolMode};
use drape::style::{self, ContentTarget, StyleObjective, StyleTerm};
use drape::tensor::Tensor;
use proptest::prelude::*;

const TAPS: [&str; 3] = ["conv1_1", "conv2_1", "conv3_1"];

fn linear_tap_loss<T: drape::tensor::Real>(network: &Network<T>, tap: &str, c: &Tensor<T>, x: &Tensor<T>) -> f64 {
    let trace = network.forward(x, &[tap]).unwrap();
    trace
        .activation(tap)
        .unwrap()
        .data()
        .iter()
        .zip(c.data())
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum()
}

fn tap_gradient<T: drape::tensor::Real>(network: &Network<T>, tap: &str, c: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let trace = network.forward(x, &[tap]).unwrap();
    let mut cot = BTreeMap::new();
    cot.insert(tap.to_string(), c.clone());
    network.backward(&trace, &cot).unwrap()
}

#[test]
fn total_gradient_matches_differences_in_f64() {
    let p = Problem::<f64>::tiny(3, 8, "conv3_1", &["conv1_1", "conv2_1"], 2);
    let x = random_tensor::<f64>([1, 3, 8, 8], 1.0, 77);
    let numeric = central_differences(|t| p.loss(t), &x, 1e-4);
    let errors = scaled_errors(&p.gradient(&x), &numeric, 1e-3);
    let kinks = kink_coordinates(&p.network, &x, 1e-4);
    for (i, e) in errors.iter().enumerate() {
        assert!(kinks[i] || *e < 1e-6, "pixel {i}: {e}");
    }
    assert!(kinks.iter().filter(|k| **k).count() <= 2);
}

#[test]
fn total_gradient_matches_differences_at_pixel_scale() {
    for seed in 0..3 {
        let p32 = Problem::<f32>::pixels(seed, 8, "conv3_1", &["conv1_1", "conv2_1"], 1);
        let p64 = Problem::<f64>::pixels(seed, 8, "conv3_1", &["conv1_1", "conv2_1"], 1);
        let x = pixel_image::<f64>(8, seed + 500);
        let analytic = p32.gradient(&x.cast());
        let numeric = central_differences(|t| p64.loss(t), &x, 1e-2);
        let ok = analytic
            .iter()
            .zip(&numeric)
            .filter(|(a, n)| relative_error(**a, **n, 0.0) < 1e-3)
            .count();
        assert!(ok * 100 >= 99 * x.len(), "seed {seed}: {ok}/{}", x.len());
    }
}

#[test]
fn average_pooling_gradient_matches_differences() {
    let net = Network::tiny(42).with_pool(PoolMode::Avg).cast::<f64>();
    let x = random_tensor::<f64>([1, 3, 8, 8], 1.0, 9);
    let c = random_tensor::<f64>([1, 32, 2, 2], 1.0, 10);
    let analytic: Vec<f64> = tap_gradient(&net, "conv3_1", &c, &x).into_vec();
    let numeric = central_differences(|t| linear_tap_loss(&net, "conv3_1", &c, t), &x, 1e-4);
    let kinks = kink_coordinates(&net, &x, 1e-4);
    for (i, e) in scaled_errors(&analytic, &numeric, 1e-3).iter().enumerate() {
        assert!(kinks[i] || *e < 1e-6, "pixel {i}: {e}");
    }
}

#[test]
fn gradient_is_additive_in_alpha_and_beta() {
    let mut p = Problem::<f64>::tiny(5, 16, "conv2_1", &["conv1_1", "conv2_1", "conv3_1"], 3);
    let x = random_tensor::<f64>([1, 3, 16, 16], 1.0, 6);
    let (alpha, beta) = (0.7, 30.0);
    p.config.alpha = alpha;
    p.config.beta = beta;
    let total = p.gradient(&x);
    p.config.beta = 0.0;
    p.config.alpha = 1.0;
    let content = p.gradient(&x);
    p.config.alpha = 0.0;
    p.config.beta = 1.0;
    let style = p.gradient(&x);
    for ((t, c), s) in total.iter().zip(&content).zip(&style) {
        assert!((t - (alpha * c + beta * s)).abs() < 1e-5, "{t} vs {}", alpha * c + beta * s);
    }
}

#[test]
fn backward_sums_per_layer_cotangents() {
    let net = Network::tiny(42);
    let x = random_tensor::<f32>([1, 3, 8, 8], 1.0, 1);
    let trace = net.forward(&x, &TAPS).unwrap();
    let cots: Vec<(String, Tensor<f32>)> = TAPS
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let shape = trace.activation(t).unwrap().shape();
            (t.to_string(), random_tensor(shape, 1.0, 40 + i as u64))
        })
        .collect();
    let joint = net.backward(&trace, &cots.iter().cloned().collect()).unwrap();
    let mut summed = vec![0.0f32; x.len()];
    for (name, c) in &cots {
        let single = net.backward(&trace, &[(name.clone(), c.clone())].into_iter().collect()).unwrap();
        for (s, v) in summed.iter_mut().zip(single.data()) {
            *s += v;
        }
    }
    for (a, b) in joint.data().iter().zip(&summed) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn untapped_cotangent_is_rejected() {
    let net = Network::tiny(42);
    let x = random_tensor::<f32>([1, 3, 8, 8], 1.0, 1);
    let trace = net.forward(&x, &["conv1_1"]).unwrap();
    let cot = [("conv2_1".to_string(), Tensor::<f32>::zeros([1, 16, 4, 4]))].into_iter().collect();
    assert!(net.backward(&trace, &cot).is_err());
}

#[test]
fn zero_beta_and_identical_image_give_zero_loss_and_gradient() {
    let net = Network::tiny(42);
    let x = random_tensor::<f32>([1, 3, 16, 16], 1.0, 2);
    let content = ContentTarget::from_image(&net, "conv2_1", &x).unwrap();
    let grams = style::gram_set(&net.forward(&x, &["conv1_1"]).unwrap(), &["conv1_1"]).unwrap();
    let styles = StyleObjective::new(vec![StyleTerm::uniform(grams, 1.0)]).unwrap();
    let config = drape::GenerationConfig {
        content_layer: "conv2_1".into(),
        style_layers: vec!["conv1_1".into()],
        beta: 0.0,
        ..drape::GenerationConfig::tiny()
    };
    let (report, grad) = style::total_loss_and_grad(&net, &config, &content, &styles, &x).unwrap();
    assert_eq!(report.total, 0.0);
    assert!(grad.data().iter().all(|g| *g == 0.0));
}

#[test]
fn zero_alpha_leaves_only_weighted_style() {
    let mut p = Problem::<f32>::tiny(8, 8, "conv3_1", &["conv1_1", "conv2_1"], 2);
    p.config.alpha = 0.0;
    let x = random_tensor::<f32>([1, 3, 8, 8], 1.0, 12);
    let (report, _) = style::total_loss_and_grad(&p.network, &p.config, &p.content, &p.styles, &x).unwrap();
    assert!(relative_error(report.total, p.config.beta * report.style, 1e-30) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Central differences are exact to within curvature wherever no ReLU or
    // pooling switch flips inside the stencil; those coordinates must all agree.
    #[test]
    fn tapped_loss_matches_differences_off_kinks(seed in 0u64..10_000, tap in 0usize..3, pixels: bool) {
        let net = Network::tiny(42);
        let n64 = net.cast::<f64>();
        let tap = TAPS[tap];
        let x = if pixels { pixel_image::<f32>(8, seed) } else { random_tensor::<f32>([1, 3, 8, 8], 1.0, seed) };
        let shape = net.forward(&x, &[tap]).unwrap().activation(tap).unwrap().shape();
        let c = random_tensor::<f32>(shape, 1.0, seed ^ 0xabcdef);
        let analytic: Vec<f64> = tap_gradient(&net, tap, &c, &x).data().iter().map(|v| *v as f64).collect();
        let numeric = central_differences(|t| linear_tap_loss(&n64, tap, &c.cast(), t), &x.cast::<f64>(), 1e-2);
        let kinks = kink_coordinates(&n64, &x.cast::<f64>(), 1e-2);
        for (i, e) in scaled_errors(&analytic, &numeric, 1e-3).iter().enumerate() {
            prop_assert!(kinks[i] || *e < 1e-3, "pixel {}: {}", i, e);
        }
    }

    #[test]
    fn backward_is_linear_in_cotangent(seed in 0u64..10_000) {
        let net = Network::tiny(42);
        let x = random_tensor::<f32>([1, 3, 8, 8], 1.0, seed);
        let trace = net.forward(&x, &["conv2_1"]).unwrap();
        let c1 = random_tensor::<f32>([1, 16, 4, 4], 1.0, seed + 1);
        let c2 = random_tensor::<f32>([1, 16, 4, 4], 1.0, seed + 2);
        let mut c12 = c1.clone();
        c12.add_scaled(&c2, 1.0).unwrap();
        let one = |c: &Tensor<f32>| net.backward(&trace, &[("conv2_1".to_string(), c.clone())].into_iter().collect()).unwrap();
        let (g1, g2, g12) = (one(&c1), one(&c2), one(&c12));
        for ((a, b), s) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
            prop_assert!((a + b - s).abs() < 1e-5);
        }
    }
}
