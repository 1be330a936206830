//! Compares reverse-mode gradients of a distillation loss with central
//! finite differences, parameter by parameter.
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use trikd::distill::{student_loss, DistillWeights};
use trikd::nn::{ArchitectureSpec, Network};
use trikd::tensor::{Tape, Tensor};

fn loss(net: &Network, x: &Tensor, peer: &Tensor, labels: &[usize], w: &DistillWeights) -> f64 {
    let tape = Tape::no_grad();
    let z = net.forward(&tape, x).unwrap();
    student_loss(&tape, Some(peer), &z, None, labels, w).unwrap().total.item().unwrap() as f64
}

fn nudge(net: &mut Network, name: &str, j: usize, delta: f32) {
    let (_, p) = net.params_mut().find(|(n, _)| *n == name).unwrap();
    p.update_data(|d| d[j] += delta);
}

fn main() {
    let spec = ArchitectureSpec::mlp(3, 4, &[8, 6], 1.0);
    let mut net = Network::init(&spec, 7).unwrap();
    let x = Tensor::from_vec(vec![5, 3], (0..15).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let peer = Tensor::from_vec(vec![5, 4], (0..20).map(|i| (i as f32 * 0.91).cos()).collect()).unwrap();
    let labels = [0, 3, 1, 2, 1];
    let w = DistillWeights { tau: 2.0, ..DistillWeights::uniform(1.0) };

    let tape = Tape::new();
    let z = net.forward(&tape, &x).unwrap();
    let obj = student_loss(&tape, Some(&peer), &z, None, &labels, &w).unwrap();
    tape.backward(&obj.total).unwrap();
    let grads: Vec<(String, Vec<f32>)> = net.params().iter().map(|(n, p)| (n.clone(), p.grad().unwrap())).collect();

    // differences of an f32 loss carry noise near 1e-4; the tests compare
    // against an f64 reference instead
    let h = 1e-3f32;
    println!("{:<16} {:>8} {:>14}", "parameter", "entries", "max |ad - fd|");
    for (name, grad) in &grads {
        let mut worst = 0.0f64;
        for (j, &g) in grad.iter().enumerate() {
            nudge(&mut net, name, j, h);
            let up = loss(&net, &x, &peer, &labels, &w);
            nudge(&mut net, name, j, -2.0 * h);
            let down = loss(&net, &x, &peer, &labels, &w);
            nudge(&mut net, name, j, h);
            worst = worst.max((g as f64 - (up - down) / (2.0 * h as f64)).abs());
        }
        println!("{name:<16} {:>8} {worst:>14.2e}", grad.len());
    }
}
