//! Reverse-mode gradients against central differences of an independent
//! `f64` forward pass.

mod common;

use common::{gradient_check_smooth, gradient_specs};

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    let specs = gradient_specs();
    assert_eq!(specs.len(), 20);
    for (i, spec) in specs.iter().enumerate() {
        let (seed, c) = gradient_check_smooth(spec, 100 * i as u64);
        assert!(c.checked > 0);
        assert!(c.max_rel_err < 1e-4, "spec {i} seed {seed}: relative error {:.3e}", c.max_rel_err);
    }
}

#[test]
fn reference_forward_agrees_with_network() {
    use trikd::nn::Network;
    use trikd::tensor::Tensor;
    for (i, spec) in gradient_specs().iter().enumerate() {
        let net = Network::init(spec, i as u64).unwrap();
        let d = spec.input_size();
        let x: Vec<f32> = (0..3 * d).map(|j| ((j * 7 + i) % 13) as f32 / 6.5 - 1.0).collect();
        let z = net.logits(&Tensor::from_vec(vec![3, d], x.clone()).unwrap()).unwrap();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let (r, _) = common::ref_forward(&common::RefParams::of(&net), &x64, 3);
        for (a, b) in z.data().iter().zip(&r) {
            assert!((*a as f64 - b).abs() < 1e-4, "spec {i}: {a} vs {b}");
        }
    }
}
