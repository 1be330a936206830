//! Loss terms on hand-checkable inputs, and the weight schedule.
//!
//! ```bash
//! cargo run --example losses
//! ```

use trikd::distill::{cross_entropy, kl_tempered, student_loss, DistillWeights};
use trikd::nn::tempered_softmax;
use trikd::tensor::{Tape, Tensor};

fn t(rows: usize, v: Vec<f32>) -> Tensor {
    let cols = v.len() / rows;
    Tensor::from_vec(vec![rows, cols], v).unwrap()
}

fn main() {
    let tape = Tape::no_grad();

    let p = tempered_softmax(&tape, &t(1, vec![2.0, 0.0]), 2.0).unwrap();
    println!("softmax([2, 0] / 2)          = {:?}", p.data());

    let ce = cross_entropy(&tape, &t(1, vec![0.25, 0.75]), &[0]).unwrap();
    println!("CE with p(true) = 0.25       = {:.6}  (ln 4)", ce.item().unwrap());
    let ce = cross_entropy(&tape, &t(1, vec![0.1; 10]), &[7]).unwrap();
    println!("CE of uniform over 10        = {:.6}  (ln 10)", ce.item().unwrap());

    let kl = kl_tempered(&tape, &t(1, vec![0.0, 0.0]), &t(1, vec![0.9f32.ln(), 0.1f32.ln()]), 1.0).unwrap();
    println!("KL([.5,.5] || [.9,.1])       = {:.6}", kl.item().unwrap());

    // at τ = 2 the term is τ² times the KL of the softened distributions
    let (a, b) = (t(1, vec![3.0, 0.0, -1.0]), t(1, vec![0.0, 1.0, 0.5]));
    let k2 = kl_tempered(&tape, &a, &b, 2.0).unwrap().item().unwrap();
    let halved = kl_tempered(&tape, &t(1, vec![1.5, 0.0, -0.5]), &t(1, vec![0.0, 0.5, 0.25]), 1.0).unwrap();
    println!("KL at tau=2 / KL of z/2      = {:.6}", k2 / halved.item().unwrap());

    let zs = t(2, vec![1.0, 0.2, -0.4, 0.1, 0.3, 2.0]);
    let zt = t(2, vec![0.8, 0.5, -1.0, 0.0, 0.0, 1.5]);
    let za = t(2, vec![2.0, 0.0, 0.0, 0.0, 0.2, 1.0]);
    let obj = student_loss(&tape, Some(&zt), &zs, Some(&za), &[0, 2], &DistillWeights::default()).unwrap();
    println!("\nstudent loss breakdown: {:?}", obj.breakdown);

    let w = DistillWeights::default();
    for progress in [0.0, 0.5, 0.625, 0.9] {
        println!("weights at progress {progress:<5} = {:?}", w.apply_schedule(progress).as_array());
    }
}
