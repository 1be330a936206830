//! Generation curriculum: each generation's student anchors the next.
//!
//! ```bash
//! cargo run --release --example curriculum
//! ```

use trikd::data::{generate_synthetic, SyntheticSpec};
use trikd::nn::ArchitectureSpec;
use trikd::trainer::{run_curriculum, DistillConfig, Wiring};

fn main() {
    let data = generate_synthetic(&SyntheticSpec { seed: 3, ..SyntheticSpec::default() }).unwrap();
    let base = ArchitectureSpec::mlp(2, 5, &[32, 32], 1.0);
    let cfg = DistillConfig {
        epochs: 20,
        generations: 3,
        ..DistillConfig::new(Wiring::Trikd, base.with_multiplier(0.5), base.with_multiplier(2.0))
    };
    let reports = run_curriculum(&cfg, &data, 3).unwrap();
    println!("{:>3} {:>8} {:>5} {:>10} {:>10} {:>10}", "gen", "wiring", "seed", "acc_S", "acc_T", "KL(T||S)");
    for r in &reports {
        let last = r.last().unwrap();
        println!(
            "{:>3} {:>8} {:>5} {:>10.4} {:>10.4} {:>10.5}",
            r.generation, r.wiring.name(), r.seed, last.test_acc_student, last.test_acc_teacher, last.kl_ts_test
        );
    }
    for g in 1..reports.len() {
        assert!(reports[g].anchor.as_ref().unwrap().same_params(&reports[g - 1].student));
    }
}
