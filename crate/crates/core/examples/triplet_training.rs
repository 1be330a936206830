//! One triplet generation on the synthetic task: an online student-teacher
//! pair trained against a frozen anchor, with per-epoch metrics.
//!
//! ```bash
//! cargo run --release --example triplet_training
//! ```

use trikd::data::{generate_synthetic, SyntheticSpec};
use trikd::nn::ArchitectureSpec;
use trikd::trainer::{run_wiring, DistillConfig, Roles, Wiring};

fn main() {
    let data = generate_synthetic(&SyntheticSpec { seed: 1, ..SyntheticSpec::default() }).unwrap();
    let base = ArchitectureSpec::mlp(2, 5, &[64, 64], 1.0);
    let cfg = DistillConfig { epochs: 20, ..DistillConfig::new(Wiring::Trikd, base.with_multiplier(0.5), base.with_multiplier(2.0)) };

    // the anchor is a student-sized network trained beforehand
    let pre = run_wiring(Wiring::OnlineDml, &cfg, &data, 1, Roles::default()).unwrap();
    let anchor = pre.student;
    let fingerprint = anchor.fingerprint();

    let report = run_wiring(Wiring::Trikd, &cfg, &data, 2, Roles { anchor: Some(anchor), teacher: None }).unwrap();
    println!("{:>5} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}", "epoch", "lr", "w2", "L_S", "L_T", "acc_S", "acc_T");
    for r in &report.records {
        println!(
            "{:>5} {:>6.3} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.epoch, r.lr, r.weights[1], r.losses[6], r.losses[7], r.test_acc_student, r.test_acc_teacher
        );
    }
    let unchanged = report.anchor.unwrap().fingerprint() == fingerprint;
    println!("anchor unchanged: {unchanged}; {:.1}s", report.seconds);
}
