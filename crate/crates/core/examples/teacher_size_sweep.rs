//! Triplet distillation with teachers of increasing width and a fixed
//! 0.5X student and anchor.
//!
//! ```bash
//! cargo run --release --example teacher_size_sweep
//! ```
//!
//! The same sweep from the command line:
//!
//! ```bash
//! for w in 1 2 4; do
//!   trikd train --config examples/configs/trikd.cfg --out runs/teacher_$w \
//!     --set anchor=runs/gen0/student.ckpt --set teacher_width=$w
//! done
//! ```

use trikd::data::{generate_synthetic, SyntheticSpec};
use trikd::nn::ArchitectureSpec;
use trikd::trainer::{run_wiring, DistillConfig, Roles, Wiring};

fn main() {
    let data = generate_synthetic(&SyntheticSpec { seed: 6, ..SyntheticSpec::default() }).unwrap();
    let base = ArchitectureSpec::mlp(2, 5, &[32, 32], 1.0);
    let cfg = |t: f64| DistillConfig { epochs: 20, ..DistillConfig::new(Wiring::Trikd, base.with_multiplier(0.5), base.with_multiplier(t)) };
    let anchor = run_wiring(Wiring::OnlineDml, &cfg(2.0), &data, 6, Roles::default()).unwrap().student;

    println!("{:>8} {:>10} {:>8} {:>8} {:>10}", "teacher", "params", "acc_S", "acc_T", "KL(T||S)");
    for t in [1.0, 2.0, 4.0] {
        let r = run_wiring(Wiring::Trikd, &cfg(t), &data, 7, Roles { anchor: Some(anchor.clone()), teacher: None }).unwrap();
        let last = r.last().unwrap();
        println!(
            "{t:>7}X {:>10} {:>8.4} {:>8.4} {:>10.5}",
            r.teacher.as_ref().unwrap().param_count(),
            last.test_acc_student,
            last.test_acc_teacher,
            last.kl_ts_test
        );
    }
}
