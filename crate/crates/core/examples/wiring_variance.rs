//! Per-sample loss variance and bias against the true posterior for the
//! five wirings M0..M4.
//!
//! ```bash
//! cargo run --release --example wiring_variance
//! ```

use trikd::data::{generate_synthetic, SyntheticSpec};
use trikd::metrics::{bias_term, loss_variance, BiasTerm};
use trikd::nn::ArchitectureSpec;
use trikd::trainer::{run_wiring, DistillConfig, Roles, Wiring};

fn main() {
    let data = generate_synthetic(&SyntheticSpec { seed: 5, ..SyntheticSpec::default() }).unwrap();
    let base = ArchitectureSpec::mlp(2, 5, &[32, 32], 1.0);
    let cfg = DistillConfig { epochs: 20, ..DistillConfig::new(Wiring::Trikd, base.with_multiplier(0.5), base.with_multiplier(2.0)) };
    let gen0 = run_wiring(Wiring::OnlineDml, &cfg, &data, 5, Roles::default()).unwrap();
    let pretrained = run_wiring(Wiring::LabelOnly, &cfg, &data, 5, Roles::default()).unwrap().teacher;

    println!("{:>6} {:>12} {:>12} {:>10}", "wiring", "mixing", "variance", "bias");
    for w in Wiring::ABLATION {
        let teacher = w.needs_pretrained_teacher().then(|| pretrained.clone().unwrap());
        let r = run_wiring(w, &cfg, &data, 6, Roles { anchor: Some(gen0.student.clone()), teacher }).unwrap();
        let mix = w.target_mixing(0.5);
        let (t, a) = (r.teacher.as_ref(), r.anchor.as_ref());
        let var = loss_variance(&r.student, t, a, &data.train, mix).unwrap();
        let bias = match bias_term(t, a, &data.train, mix).unwrap() {
            BiasTerm::Value(v) => format!("{v:.4}"),
            BiasTerm::Unavailable => "unavailable".into(),
        };
        println!("{:>6} {:>12} {var:>12.3e} {bias:>10}", w.name(), mix.to_string());
    }
}
